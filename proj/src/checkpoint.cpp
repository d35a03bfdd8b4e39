#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <boost/crc.hpp>

#include "sani/errors.hpp"
#include "sani/model.hpp"

namespace sani {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

using Crc64 = boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, ~0ULL, ~0ULL, true, true>;

constexpr char kMagic[4] = {'S', 'A', 'N', 'I'};

class Writer {
 public:
  template <typename T>
  void pod(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void bytes(std::string_view s) { out_.append(s); }
  void str(std::string_view s) {
    pod(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  void tensor(std::string_view name, const Tensor& t) {
    str(name);
    pod(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape) pod(static_cast<std::uint64_t>(d));
    out_.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(double));
  }
  std::string& buffer() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}

  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str() { return std::string(bytes(pod<std::uint32_t>())); }
  std::pair<std::string, Tensor> tensor() {
    std::string name = str();
    const auto rank = pod<std::uint32_t>();
    if (rank > 2) throw Error(ErrorCode::CorruptFile, "tensor '" + name + "' has rank " + std::to_string(rank));
    std::vector<std::size_t> shape;
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape.push_back(static_cast<std::size_t>(pod<std::uint64_t>()));
      n *= shape.back();
    }
    if (n > remaining() / sizeof(double)) throw Error(ErrorCode::CorruptFile, "tensor '" + name + "' overruns file");
    Tensor t(shape);
    auto raw = bytes(n * sizeof(double));
    std::memcpy(t.data.data(), raw.data(), raw.size());
    return {std::move(name), std::move(t)};
  }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw Error(ErrorCode::CorruptFile, "unexpected end of checkpoint");
  }

  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  const ModelParams& p = ckpt.params;
  nlohmann::ordered_json header;
  header["model"] = p.config().to_json();
  header["epoch"] = ckpt.epoch;
  header["adam_step"] = ckpt.adam ? ckpt.adam->step : 0;
  header["has_adam"] = ckpt.adam.has_value();
  header["rng"] = ckpt.rng_state;

  Writer w;
  w.bytes(std::string_view(kMagic, 4));
  w.pod(kCheckpointVersion);
  w.str(header.dump());
  const std::size_t n_records = p.size() * (ckpt.adam ? 3 : 1);
  w.pod(static_cast<std::uint32_t>(n_records));
  for (std::size_t i = 0; i < p.size(); ++i) w.tensor(p.names()[i], p.tensors()[i]);
  if (ckpt.adam) {
    if (!ckpt.adam->matches(p.tensors())) throw Error(ErrorCode::ShapeMismatch, "optimizer state does not match parameters");
    for (std::size_t i = 0; i < p.size(); ++i) w.tensor("adam.m/" + p.names()[i], ckpt.adam->m[i]);
    for (std::size_t i = 0; i < p.size(); ++i) w.tensor("adam.v/" + p.names()[i], ckpt.adam->v[i]);
  }
  Crc64 crc;
  crc.process_bytes(w.buffer().data(), w.buffer().size());
  w.pod(static_cast<std::uint64_t>(crc.checksum()));
  return std::move(w.buffer());
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::IoError, "short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint deserialize_checkpoint(std::string_view bytes, std::optional<Variant> expected) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw Error(ErrorCode::CorruptFile, "not a checkpoint (bad magic or too short)");
  }
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 4, 4);
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::FormatVersionMismatch,
                "checkpoint version " + std::to_string(version) + ", expected " + std::to_string(kCheckpointVersion));
  }
  const auto body = bytes.substr(0, bytes.size() - 8);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), 8);
  Crc64 crc;
  crc.process_bytes(body.data(), body.size());
  if (crc.checksum() != stored) throw Error(ErrorCode::CorruptFile, "checksum mismatch");

  Reader r(body.substr(8));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptFile, std::string("bad header: ") + e.what());
  }
  const ModelConfig cfg = ModelConfig::from_json(header.at("model"));
  if (expected && *expected != cfg.variant) {
    throw Error(ErrorCode::ConfigError, "checkpoint holds a " + std::string(to_string(cfg.variant)) +
                                            " model, expected " + std::string(to_string(*expected)));
  }

  Checkpoint ck;
  ck.params = ModelParams::shaped(cfg);
  ck.epoch = header.value("epoch", std::uint64_t{0});
  ck.rng_state = header.value("rng", std::string{});
  const bool has_adam = header.value("has_adam", false);
  if (has_adam) {
    ck.adam = AdamState(ck.params.tensors());
    ck.adam->step = header.value("adam_step", std::uint64_t{0});
  }

  const auto n_records = r.pod<std::uint32_t>();
  std::size_t seen = 0;
  for (std::uint32_t k = 0; k < n_records; ++k) {
    auto [name, t] = r.tensor();
    Tensor* slot = nullptr;
    std::string_view base = name;
    std::vector<Tensor>* moments = nullptr;
    if (has_adam && base.starts_with("adam.m/")) {
      moments = &ck.adam->m;
      base.remove_prefix(7);
    } else if (has_adam && base.starts_with("adam.v/")) {
      moments = &ck.adam->v;
      base.remove_prefix(7);
    }
    auto idx = ck.params.find(base);
    if (!idx) throw Error(ErrorCode::CorruptFile, "unknown tensor '" + name + "'");
    slot = moments ? &(*moments)[*idx] : &ck.params.tensors()[*idx];
    if (!slot->same_shape(t)) {
      throw Error(ErrorCode::CorruptFile, "tensor '" + name + "' has shape " + shape_string(t.shape) + ", expected " +
                                              shape_string(slot->shape));
    }
    *slot = std::move(t);
    ++seen;
  }
  if (seen != ck.params.size() * (has_adam ? 3 : 1) || r.remaining() != 0) {
    throw Error(ErrorCode::CorruptFile, "record count does not match the model");
  }
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<Variant> expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str(), expected);
}

}  // namespace sani
