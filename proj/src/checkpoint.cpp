#include "crtnet/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "crtnet/errors.hpp"

namespace crtnet {

namespace {

constexpr char kMagic[8] = {'C', 'R', 'T', 'N', 'E', 'T', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void put(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, raw, sizeof(T));
    return value;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const CheckpointFile& file) {
  std::string out(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(file.kind));
  std::string meta;
  for (const auto& [k, v] : file.meta) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw CheckpointError("meta entry '" + k + "' contains a reserved character");
    meta += k + "=" + v + "\n";
  }
  put<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  put<std::uint64_t>(out, file.records.size());
  for (const auto& [name, t] : file.records) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    for (double v : t.data()) put<double>(out, v);
  }
  return out;
}

CheckpointFile decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw CheckpointError("not a crtnet checkpoint (bad magic)");
  Reader in(bytes);
  in.get_string(sizeof kMagic);
  const auto version = in.get<std::uint32_t>();
  if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  CheckpointFile file;
  const auto kind = in.get<std::uint32_t>();
  if (kind > 1) throw CheckpointError("unknown checkpoint kind " + std::to_string(kind));
  file.kind = static_cast<CheckpointFile::Kind>(kind);
  std::istringstream meta(in.get_string(in.get<std::uint32_t>()));
  std::string line;
  while (std::getline(meta, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("malformed meta line '" + line + "'");
    file.meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto count = in.get<std::uint64_t>();
  for (std::uint64_t r = 0; r < count; ++r) {
    std::string name = in.get_string(in.get<std::uint32_t>());
    const auto rank = in.get<std::uint32_t>();
    if (rank == 0 || rank > 8) throw CheckpointError("record '" + name + "' has invalid rank");
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(in.get<std::uint64_t>());
    const std::size_t n = numel(shape);
    if (n > (std::size_t{1} << 32)) throw CheckpointError("record '" + name + "' is implausibly large");
    std::vector<double> values(n);
    for (double& v : values) v = in.get<double>();
    file.records.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (!in.done()) throw CheckpointError("trailing bytes after last record");
  return file;
}

void write_checkpoint(const std::filesystem::path& path, const CheckpointFile& file) {
  const std::string bytes = encode_checkpoint(file);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place: " + ec.message());
}

CheckpointFile read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_checkpoint(buf.str());
}

CheckpointFile model_checkpoint(const ModelConfig& config, const CrtnetParams& params) {
  CheckpointFile file;
  for (const auto& [k, v] : config.to_map()) file.meta["model." + k] = v;
  for (const auto& [name, t] : params.named()) file.records.emplace_back(name, t);
  return file;
}

std::map<std::string, std::string> strip_prefix(const std::map<std::string, std::string>& kv,
                                                const std::string& prefix) {
  std::map<std::string, std::string> out;
  for (const auto& [k, v] : kv)
    if (k.rfind(prefix, 0) == 0) out[k.substr(prefix.size())] = v;
  return out;
}

void assign_params(const CheckpointFile& file, const CrtnetParams& params) {
  std::map<std::string, const Tensor*> stored;
  for (const auto& [name, t] : file.records) stored[name] = &t;
  for (const auto& [name, t] : params.named()) {
    const auto it = stored.find(name);
    if (it == stored.end()) throw CheckpointError("checkpoint lacks parameter '" + name + "'");
    if (it->second->shape() != t.shape())
      throw CheckpointError("parameter '" + name + "' has shape " + shape_str(it->second->shape()) + ", expected " +
                            shape_str(t.shape()));
    Tensor dst = t;
    const auto src = it->second->data();
    std::copy(src.begin(), src.end(), dst.mutable_data().begin());
  }
}

LoadedModel load_model(const CheckpointFile& file) {
  LoadedModel out;
  try {
    out.config = ModelConfig::from_map(strip_prefix(file.meta, "model."));
    out.config.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config: ") + e.what());
  }
  Rng scratch(0);
  out.params = CrtnetParams::init(out.config, scratch);
  assign_params(file, out.params);
  return out;
}

LoadedModel load_model(const std::filesystem::path& path) { return load_model(read_checkpoint(path)); }

}  // namespace crtnet
