#include "promptpar/archive.hpp"

#include "promptpar/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace promptpar {

namespace {

constexpr char kMagic[8] = {'P', 'P', 'A', 'R', 'C', 'H', 'V', '1'};

static_assert(std::endian::native == std::endian::little, "archive I/O assumes little-endian");

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw LoadError("archive truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string Archive::serialize() const {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(texts.size()));
  for (const auto& [name, t] : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint8_t>(out, t.trainable ? 1 : 0);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.rows()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.cols()));
    out.append(reinterpret_cast<const char*>(t.value.data()),
               static_cast<std::size_t>(t.value.size()) * sizeof(double));
  }
  for (const auto& [name, text] : texts) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint64_t>(out, text.size());
    out += text;
  }
  return out;
}

Archive Archive::deserialize(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw LoadError("not an archive (bad magic)");
  }
  Reader r(bytes);
  r.get_bytes(sizeof(kMagic));
  Archive a;
  const auto ntensors = r.get<std::uint32_t>();
  const auto ntexts = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < ntensors; ++i) {
    const std::string name = r.get_bytes(r.get<std::uint32_t>());
    Tensor t;
    t.trainable = r.get<std::uint8_t>() != 0;
    const auto rows = r.get<std::uint32_t>();
    const auto cols = r.get<std::uint32_t>();
    t.value.resize(rows, cols);
    const std::string raw = r.get_bytes(static_cast<std::size_t>(rows) * cols * sizeof(double));
    std::memcpy(t.value.data(), raw.data(), raw.size());
    a.tensors.emplace(name, std::move(t));
  }
  for (std::uint32_t i = 0; i < ntexts; ++i) {
    const std::string name = r.get_bytes(r.get<std::uint32_t>());
    const auto len = r.get<std::uint64_t>();
    a.texts.emplace(name, r.get_bytes(len));
  }
  if (!r.done()) throw LoadError("archive has trailing bytes");
  return a;
}

void Archive::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write archive " + path);
  const std::string bytes = serialize();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw LoadError("failed writing archive " + path);
}

Archive Archive::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open archive " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return deserialize(ss.str());
  } catch (const LoadError& e) {
    throw LoadError(path + ": " + e.what());
  }
}

std::string digest_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace promptpar
