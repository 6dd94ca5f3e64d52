#include "tal/io.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

#include <zlib.h>

namespace tal {

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
      buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void finish_with_crc() { u32(crc32_of(buf_, 4, buf_.size())); }
  void save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
      throw Error("cannot open " + path.string() + " for writing");
    }
    os.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
    if (!os) {
      throw Error("write failed for " + path.string());
    }
  }

 private:
  std::vector<unsigned char> buf_;
};

class Reader {
 public:
  Reader(std::vector<unsigned char> buf, std::string what)
      : buf_(std::move(buf)), what_(std::move(what)) {}

  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) {
      throw FormatError(what_ + ": truncated file");
    }
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
    }
    pos_ += 4;
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string str(std::size_t max_len) {
    const std::uint32_t n = u32();
    if (n > max_len) {
      throw FormatError(what_ + ": string length " + std::to_string(n) + " out of range");
    }
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void check_magic(const char* magic) {
    need(4);
    if (std::memcmp(buf_.data(), magic, 4) != 0) {
      throw FormatError(what_ + ": bad magic (expected " + std::string(magic, 4) + ")");
    }
    pos_ = 4;
  }
  // The last four bytes are the CRC of everything between magic and CRC.
  void check_crc() const {
    if (buf_.size() < 8) {
      throw FormatError(what_ + ": truncated file");
    }
    const std::size_t end = buf_.size() - 4;
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) {
      stored |= static_cast<std::uint32_t>(buf_[end + i]) << (8 * i);
    }
    if (stored != crc32_of(buf_, 4, end)) {
      throw FormatError(what_ + ": CRC mismatch (corrupt or truncated file)");
    }
  }
  void expect_end() const {
    if (pos_ + 4 != buf_.size()) {
      throw FormatError(what_ + ": payload length does not match header");
    }
  }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  std::vector<unsigned char> buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw Error("cannot open " + path.string());
  }
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

} // namespace

std::uint32_t crc32_of(const std::vector<unsigned char>& bytes, std::size_t begin,
                       std::size_t end) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  crc = ::crc32(crc, bytes.data() + begin, static_cast<uInt>(end - begin));
  return static_cast<std::uint32_t>(crc);
}

void save_weights(const Model<float>& model, const std::filesystem::path& path) {
  Writer w;
  w.bytes("TALW", 4);
  w.u32(kWeightFormatVersion);
  const auto lines = model.arch().descriptor_lines();
  w.u32(static_cast<std::uint32_t>(lines.size()));
  for (const auto& l : lines) {
    w.str(l);
  }
  for (std::size_t i = 0; i < model.layer_count(); ++i) {
    if (!model.arch().layers[i].has_params()) {
      continue;
    }
    for (float v : model.weight(i).data()) {
      w.f32(v);
    }
    for (float v : model.bias(i).data()) {
      w.f32(v);
    }
  }
  w.finish_with_crc();
  w.save(path);
}

Model<float> load_weights(const std::filesystem::path& path) {
  Reader r(slurp(path), path.string());
  r.check_magic("TALW");
  r.check_crc();
  const std::uint32_t version = r.u32();
  if (version != kWeightFormatVersion) {
    throw FormatError(path.string() + ": unsupported weight format version " +
                      std::to_string(version));
  }
  const std::uint32_t n_lines = r.u32();
  if (n_lines > 4096) {
    throw FormatError(path.string() + ": implausible descriptor length");
  }
  std::vector<std::string> lines;
  for (std::uint32_t i = 0; i < n_lines; ++i) {
    lines.push_back(r.str(1024));
  }
  Architecture arch;
  try {
    arch = Architecture::from_descriptor(lines);
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": bad architecture descriptor: " + e.what());
  }
  Model<float> model(arch);
  for (std::size_t i = 0; i < model.layer_count(); ++i) {
    if (!arch.layers[i].has_params()) {
      continue;
    }
    for (auto* t : {&model.weight(i), &model.bias(i)}) {
      r.need(4 * t->numel());
      for (auto& v : t->data()) {
        v = r.f32();
      }
      if (!t->all_finite()) {
        throw FormatError(path.string() + ": non-finite weights");
      }
    }
  }
  r.expect_end();
  return model;
}

Model<float> load_weights(const std::filesystem::path& path, const Architecture& expected) {
  auto model = load_weights(path);
  const auto& a = model.arch();
  if (a.num_classes != expected.num_classes) {
    throw SpecMismatchError(path.string() + ": model has " + std::to_string(a.num_classes) +
                            " classes, expected " + std::to_string(expected.num_classes));
  }
  if (!(a == expected)) {
    throw SpecMismatchError(path.string() + ": stored architecture '" + a.name +
                            "' differs from expected '" + expected.name + "'");
  }
  return model;
}

void save_batch(const AdversarialBatch& batch, const std::filesystem::path& path) {
  const auto& s = batch.images.shape();
  if (s.empty() || batch.targets.size() != s[0]) {
    throw ShapeError("save_batch: need one target per image");
  }
  Writer w;
  w.bytes("TALB", 4);
  w.u32(kBatchFormatVersion);
  w.u32(static_cast<std::uint32_t>(s.size()));
  for (auto d : s) {
    w.u32(static_cast<std::uint32_t>(d));
  }
  w.u32(static_cast<std::uint32_t>(batch.targets.size()));
  for (auto t : batch.targets) {
    w.i32(static_cast<std::int32_t>(t));
  }
  for (float v : batch.images.data()) {
    w.f32(v);
  }
  w.finish_with_crc();
  w.save(path);
}

AdversarialBatch load_batch(const std::filesystem::path& path) {
  Reader r(slurp(path), path.string());
  r.check_magic("TALB");
  r.check_crc();
  const std::uint32_t version = r.u32();
  if (version != kBatchFormatVersion) {
    throw FormatError(path.string() + ": unsupported batch format version " +
                      std::to_string(version));
  }
  const std::uint32_t rank = r.u32();
  if (rank == 0 || rank > 8) {
    throw FormatError(path.string() + ": bad tensor rank");
  }
  Shape s(rank);
  for (auto& d : s) {
    d = r.u32();
  }
  const std::uint32_t n_labels = r.u32();
  if (n_labels != s[0]) {
    throw FormatError(path.string() + ": label count does not match batch size");
  }
  AdversarialBatch b;
  for (std::uint32_t i = 0; i < n_labels; ++i) {
    const std::int32_t t = r.i32();
    if (t < 0) {
      throw FormatError(path.string() + ": negative label");
    }
    b.targets.push_back(static_cast<std::size_t>(t));
  }
  const std::size_t n = shape_numel(s);
  r.need(4 * n);
  std::vector<float> data(n);
  for (auto& v : data) {
    v = r.f32();
  }
  r.expect_end();
  try {
    b.images = Tensor(s, std::move(data));
  } catch (const ValueError&) {
    throw FormatError(path.string() + ": non-finite pixels");
  }
  return b;
}

} // namespace tal
