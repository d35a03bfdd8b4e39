#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "sani/metrics.hpp"

namespace sani {

/// A stored term table read back from disk.
struct TermTable {
  std::vector<std::string> terms;
  RegurgitationCount count;
};

TermTable parse_term_table(const std::string& csv);

/// Decile summary of a frequency analysis: events summed over the terms in
/// the top and bottom frequency deciles of `reference` (so that tables at
/// different stages are compared on the same terms).
struct DecileEvents {
  std::size_t top = 0;
  std::size_t bottom = 0;
};

DecileEvents decile_events(const RegurgitationCount& reference, const RegurgitationCount& stage);

/// Writes <out>/report/fig*.csv from the stored metrics, term tables and
/// downstream scores of an output directory, and returns the written paths.
///
///   fig1a / fig4a   series,epoch,phase,privacy       (MLM / CLM)
///   fig1b / fig4b   series,epoch,phase,utility
///   fig2a           series,epoch,phase,regurgitation  (conf-target runs)
///   fig2b           series,epoch,f1
///   fig3a           term,repetitions,events           (before unlearning)
///   fig3b           rank,repetitions,before,after_1,after_2 (cumulative events)
///   fig3_summary    stage,spearman,term_events,top_decile_events,bottom_decile_events
///
/// Throws IncompleteRuns naming every missing input unless partial is set,
/// in which case figures with missing inputs are skipped.
std::vector<std::filesystem::path> run_report(const std::filesystem::path& out, bool partial = false);

}  // namespace sani
