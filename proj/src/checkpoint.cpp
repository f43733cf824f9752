#include "evasim/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "evasim/error.hpp"

namespace evasim::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint layout assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'E', 'V', 'A', 'S', 'I', 'M', 'C', 'K'};

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& s) : s_(s) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, s_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string out = s_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  bool done() const { return pos_ == s_.size(); }

 private:
  void need(std::size_t n) const {
    if (s_.size() - pos_ < n) throw InputError("checkpoint truncated");
  }
  const std::string& s_;
  std::size_t pos_ = 0;
};

}  // namespace

const Eigen::MatrixXd& TensorFile::at(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw InputError("checkpoint has no tensor '" + name + "'");
}

std::string encode(const TensorFile& file) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string meta = kv::serialize(file.meta);
  put<std::uint64_t>(out, meta.size());
  out += meta;
  put<std::uint64_t>(out, file.tensors.size());
  for (const auto& [name, t] : file.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint64_t>(out, static_cast<std::uint64_t>(t.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(t.cols()));
    for (Eigen::Index r = 0; r < t.rows(); ++r) {
      for (Eigen::Index c = 0; c < t.cols(); ++c) put<double>(out, t(r, c));
    }
  }
  return out;
}

TensorFile decode(const std::string& bytes) {
  Reader in(bytes);
  if (in.bytes(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) throw InputError("not a checkpoint file");
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw InputError("unsupported checkpoint version " + std::to_string(version));
  TensorFile file;
  file.meta = kv::parse(in.bytes(in.get<std::uint64_t>()));
  const auto count = in.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = in.bytes(in.get<std::uint32_t>());
    const auto rows = in.get<std::uint64_t>();
    const auto cols = in.get<std::uint64_t>();
    if (rows > (1u << 24) || cols > (1u << 24)) throw InputError("implausible tensor shape for " + name);
    Eigen::MatrixXd t(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index r = 0; r < t.rows(); ++r) {
      for (Eigen::Index c = 0; c < t.cols(); ++c) t(r, c) = in.get<double>();
    }
    file.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (!in.done()) throw InputError("trailing bytes after checkpoint payload");
  return file;
}

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  const std::string bytes = encode(file);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw InputError("failed to write checkpoint " + path.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode(ss.str());
}

}  // namespace evasim::nn
