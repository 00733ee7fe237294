#include "reltr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace reltr {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'R', 'E', 'L', 'T', 'R', 'C', 'K', 'P'};

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (n > bytes_.size() - pos_)
      throw std::runtime_error(std::string("checkpoint truncated while reading ") + what + " at byte " +
                               std::to_string(pos_));
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const NamedArray* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return &a;
  return nullptr;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, Checkpoint::kVersion);
  const std::string meta = ckpt.metadata.dump();
  put<std::uint64_t>(out, meta.size());
  out += meta;
  put<std::uint64_t>(out, ckpt.arrays.size());
  for (const auto& a : ckpt.arrays) {
    if (shape_numel(a.shape) != a.data.size())
      throw std::invalid_argument("checkpoint array '" + a.name + "' has shape " + shape_string(a.shape) + " but " +
                                  std::to_string(a.data.size()) + " values");
    put<std::uint32_t>(out, static_cast<std::uint32_t>(a.name.size()));
    out += a.name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(a.shape.size()));
    for (std::size_t d : a.shape) put<std::uint64_t>(out, d);
    const std::size_t offset = out.size();
    out.resize(offset + a.data.size() * sizeof(double));
    std::memcpy(out.data() + offset, a.data.data(), a.data.size() * sizeof(double));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (in.take(sizeof(kMagic), "magic") != std::string(kMagic, sizeof(kMagic)))
    throw std::runtime_error("not a checkpoint: bad magic");
  const auto version = in.get<std::uint32_t>("version");
  if (version != Checkpoint::kVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  const auto meta_len = in.get<std::uint64_t>("metadata length");
  try {
    ckpt.metadata = nlohmann::json::parse(in.take(meta_len, "metadata"));
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  const auto count = in.get<std::uint64_t>("array count");
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = in.take(in.get<std::uint32_t>("name length"), "name");
    const auto rank = in.get<std::uint32_t>("rank");
    for (std::uint32_t r = 0; r < rank; ++r) a.shape.push_back(in.get<std::uint64_t>("dimension"));
    const std::size_t n = shape_numel(a.shape);
    const std::string raw = in.take(n * sizeof(double), "array data");
    a.data.resize(n);
    std::memcpy(a.data.data(), raw.data(), raw.size());
    ckpt.arrays.push_back(std::move(a));
  }
  if (!in.done()) throw std::runtime_error("checkpoint has trailing bytes");
  return ckpt;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace reltr
