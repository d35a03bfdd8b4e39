#include "sani/report.hpp"

#include <algorithm>
#include <map>
#include <optional>
#include <sstream>

#include <json.hpp>

#include "sani/errors.hpp"
#include "sani/harness.hpp"

namespace sani {

namespace fs = std::filesystem;

TermTable parse_term_table(const std::string& csv) {
  TermTable table;
  std::istringstream in(csv);
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (line.empty()) continue;
    // The term text may contain commas; the three numeric fields are last.
    std::size_t cut[3];
    std::size_t pos = line.size();
    for (int k = 2; k >= 0; --k) {
      pos = line.rfind(',', pos - 1);
      if (pos == std::string::npos || pos == 0) throw Error(ErrorCode::CorruptFile, "bad term table row: " + line);
      cut[k] = pos;
    }
    TermRow row;
    try {
      row.repetitions = std::stoull(line.substr(cut[0] + 1, cut[1] - cut[0] - 1));
      row.events = std::stoull(line.substr(cut[1] + 1, cut[2] - cut[1] - 1));
      row.capped = std::stoull(line.substr(cut[2] + 1));
    } catch (const std::exception&) {
      throw Error(ErrorCode::CorruptFile, "bad term table row: " + line);
    }
    table.terms.push_back(line.substr(0, cut[0]));
    table.count.terms.push_back(row);
    table.count.events += row.events;
  }
  return table;
}

DecileEvents decile_events(const RegurgitationCount& reference, const RegurgitationCount& stage) {
  if (reference.terms.size() != stage.terms.size()) throw Error(ErrorCode::ShapeMismatch, "term tables differ in size");
  DecileEvents d;
  for (std::size_t t : frequency_decile(reference, true)) d.top += stage.terms[t].events;
  for (std::size_t t : frequency_decile(reference, false)) d.bottom += stage.terms[t].events;
  return d;
}

namespace {

struct Inputs {
  fs::path out;
  std::vector<std::string> missing;

  std::optional<std::string> read(const fs::path& p) {
    if (!fs::exists(p)) {
      missing.push_back(fs::relative(p, out).generic_string());
      return std::nullopt;
    }
    return read_text(p);
  }
};

struct Series {
  std::string label;
  std::vector<MetricsRecord> rows;
};

std::string phase_str(const MetricsRecord& r) { return std::string(to_string(r.phase)); }

std::string series_csv(const std::string& column, const std::vector<Series>& series,
                       double (*value)(const MetricsRecord&)) {
  std::string out = "series,epoch,phase," + column + "\n";
  for (const auto& s : series) {
    for (const auto& r : s.rows) {
      out += s.label + "," + std::to_string(r.epoch) + "," + phase_str(r) + "," + format_real(value(r)) + "\n";
    }
  }
  return out;
}

double privacy_of(const MetricsRecord& r) { return r.privacy; }
double utility_of(const MetricsRecord& r) { return r.utility; }
double regurgitation_of(const MetricsRecord& r) { return r.regurgitation; }

}  // namespace

std::vector<fs::path> run_report(const fs::path& out, bool partial) {
  const fs::path config_path = out / "config.json";
  if (!fs::exists(config_path)) throw Error(ErrorCode::IncompleteRuns, "missing config.json in " + out.string());
  nlohmann::json cfg;
  try {
    cfg = nlohmann::json::parse(read_text(config_path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptFile, config_path.string() + ": " + e.what());
  }
  std::vector<Strategy> strategies;
  for (const auto& s : cfg.at("strategies").get<std::vector<std::string>>()) strategies.push_back(strategy_from_string(s));
  const std::uint64_t seed = cfg.at("seeds").get<std::vector<std::uint64_t>>().at(0);

  Inputs in{out, {}};
  std::vector<std::pair<std::string, std::string>> figures;  // name, content

  auto load_series = [&](const std::string& label, const std::string& run) -> std::optional<Series> {
    auto text = in.read(RunPaths::metrics(out, run));
    if (!text) return std::nullopt;
    return Series{label, parse_metrics_csv(*text)};
  };

  // Fine-tuned-model sanitization, MLM (fig1) and CLM (fig4).
  const std::pair<const char*, std::vector<Curve>> families[] = {
      {"1", {Curve::MLM, Curve::MLMA, Curve::PPMLM}},
      {"4", {Curve::CLM, Curve::CLMA, Curve::PPCLM}},
  };
  for (const auto& [fig, curves] : families) {
    const std::size_t before = in.missing.size();
    std::vector<Series> series;
    for (Curve c : curves) {
      if (auto s = load_series(std::string(to_string(c)), std::string(to_string(c)))) series.push_back(std::move(*s));
    }
    for (Strategy st : strategies) {
      const std::string run = sanitize_run_id(curves.front(), st, Target::Identifiers, seed);
      if (auto s = load_series(std::string(to_string(st)), run)) series.push_back(std::move(*s));
    }
    if (in.missing.size() != before) continue;
    figures.emplace_back("fig" + std::string(fig) + "a", series_csv("privacy", series, privacy_of));
    figures.emplace_back("fig" + std::string(fig) + "b", series_csv("utility", series, utility_of));
  }

  // Sanitization against the confidential terms (fig2) and its frequency
  // analysis (fig3).
  const std::string conf_run = sanitize_run_id(Curve::MLM, Strategy::SANI, Target::Conf, seed);
  {
    const std::size_t before = in.missing.size();
    std::vector<Series> series;
    if (auto s = load_series("sani", conf_run)) series.push_back(std::move(*s));
    for (Strategy st : strategies) {
      if (st == Strategy::SANI) continue;
      const std::string run = sanitize_run_id(Curve::MLM, st, Target::Conf, seed);
      if (fs::exists(RunPaths::metrics(out, run))) series.push_back(*load_series(std::string(to_string(st)), run));
    }
    auto f1 = in.read(RunPaths::downstream(out, conf_run));
    if (in.missing.size() == before) {
      figures.emplace_back("fig2a", series_csv("regurgitation", series, regurgitation_of));
      std::string csv = "series,epoch,f1\n";
      std::istringstream lines(*f1);
      std::string line;
      std::getline(lines, line);
      while (std::getline(lines, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        csv += "sani" + line.substr(comma) + "\n";
      }
      figures.emplace_back("fig2b", csv);

      const std::size_t first = series.front().rows.front().epoch;
      auto t_before = in.read(RunPaths::terms(out, conf_run, "before", Target::Conf));
      auto t_after1 = in.read(RunPaths::terms(out, conf_run, "e" + std::to_string(first + 1), Target::Conf));
      auto t_after2 = in.read(RunPaths::terms(out, conf_run, "e" + std::to_string(first + 2), Target::Conf));
      if (in.missing.size() == before) {
        const TermTable tb = parse_term_table(*t_before);
        const TermTable t1 = parse_term_table(*t_after1);
        const TermTable t2 = parse_term_table(*t_after2);
        if (t1.terms.size() != tb.terms.size() || t2.terms.size() != tb.terms.size()) {
          throw Error(ErrorCode::CorruptFile, "term tables of " + conf_run + " differ in size");
        }
        std::string a = "term,repetitions,events\n";
        for (std::size_t t = 0; t < tb.terms.size(); ++t) {
          a += tb.terms[t] + "," + std::to_string(tb.count.terms[t].repetitions) + "," +
               std::to_string(tb.count.terms[t].events) + "\n";
        }
        figures.emplace_back("fig3a", a);

        const FrequencyAnalysis fb = frequency_analysis(tb.count);
        std::string b = "rank,repetitions,before,after_1,after_2\n";
        std::size_t c1 = 0, c2 = 0;
        for (std::size_t r = 0; r < fb.cumulative.size(); ++r) {
          const FrequencyRow& row = fb.cumulative[r];
          c1 += t1.count.terms[row.term].events;
          c2 += t2.count.terms[row.term].events;
          b += std::to_string(r + 1) + "," + std::to_string(row.repetitions) + "," +
               std::to_string(row.cumulative_events) + "," + std::to_string(c1) + "," + std::to_string(c2) + "\n";
        }
        figures.emplace_back("fig3b", b);

        std::string s = "stage,spearman,term_events,top_decile_events,bottom_decile_events\n";
        const std::pair<const char*, const TermTable*> stages[] = {{"before", &tb}, {"after_1", &t1}, {"after_2", &t2}};
        for (const auto& [name, table] : stages) {
          const DecileEvents d = decile_events(tb.count, table->count);
          s += std::string(name) + "," + format_real(frequency_analysis(table->count).spearman) + "," +
               std::to_string(table->count.events) + "," + std::to_string(d.top) + "," + std::to_string(d.bottom) +
               "\n";
        }
        figures.emplace_back("fig3_summary", s);
      }
    }
  }

  if (!in.missing.empty() && !partial) {
    std::string msg = "missing:";
    for (const auto& m : in.missing) msg += " " + m;
    throw Error(ErrorCode::IncompleteRuns, msg);
  }
  std::vector<fs::path> written;
  for (const auto& [name, content] : figures) {
    const fs::path p = out / "report" / (name + ".csv");
    write_text(p, content);
    written.push_back(p);
  }
  return written;
}

}  // namespace sani
