#include "tal/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <numbers>
#include <sstream>

#include "tal/rng.hpp"

namespace tal {

namespace fs = std::filesystem;

LabeledDataset LabeledDataset::slice(std::size_t begin, std::size_t end) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = begin; i < end; ++i) {
    idx.push_back(i);
  }
  return select(idx);
}

LabeledDataset LabeledDataset::select(std::span<const std::size_t> indices) const {
  LabeledDataset out;
  out.num_classes = num_classes;
  Shape s = images.shape();
  s[0] = indices.size();
  out.images = Tensor::uninitialized(s);
  const std::size_t per = images.numel() / std::max<std::size_t>(images.dim(0), 1);
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const std::size_t i = indices[j];
    if (i >= size()) {
      throw ShapeError("dataset index out of range");
    }
    std::copy_n(images.ptr() + i * per, per, out.images.ptr() + j * per);
    out.labels.push_back(labels[i]);
    if (!targets.empty()) {
      out.targets.push_back(targets[i]);
    }
    if (!splits.empty()) {
      out.splits.push_back(splits[i]);
    }
  }
  return out;
}

void LabeledDataset::validate() const {
  if (images.rank() != 4 || images.dim(0) != labels.size()) {
    throw ValueError("dataset: image/label count mismatch");
  }
  if (!targets.empty() && targets.size() != labels.size()) {
    throw ValueError("dataset: target/label count mismatch");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw ValueError("dataset: label out of range at " + std::to_string(i));
    }
    if (!targets.empty() && (targets[i] >= num_classes || targets[i] == labels[i])) {
      throw ValueError("dataset: invalid target at " + std::to_string(i));
    }
  }
}

// ---------------------------------------------------------------------------
// Formats

DatasetFormat parse_dataset_format(std::string_view name) {
  if (name == "auto") return DatasetFormat::Auto;
  if (name == "cifar10-binary") return DatasetFormat::Cifar10Binary;
  if (name == "image-directory") return DatasetFormat::ImageDirectory;
  if (name == "synthetic") return DatasetFormat::Synthetic;
  throw ConfigError("unknown dataset format '" + std::string(name) + "'");
}

namespace {

constexpr std::size_t kCifarSide = 32;
constexpr std::size_t kCifarPixels = 3 * kCifarSide * kCifarSide;

std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

LabeledDataset load_cifar(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw Error("cannot open " + path.string());
  }
  std::vector<unsigned char> buf{std::istreambuf_iterator<char>(is),
                                 std::istreambuf_iterator<char>()};
  const std::size_t rec = 1 + kCifarPixels;
  if (buf.empty() || buf.size() % rec != 0) {
    throw FormatError(path.string() + ": size is not a multiple of the 3073-byte record");
  }
  const std::size_t n = buf.size() / rec;
  LabeledDataset d;
  d.images = Tensor::uninitialized({n, 3, kCifarSide, kCifarSide});
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* r = buf.data() + i * rec;
    if (r[0] >= d.num_classes) {
      throw ValueError(path.string() + ": label " + std::to_string(r[0]) + " out of range");
    }
    d.labels.push_back(r[0]);
    for (std::size_t p = 0; p < kCifarPixels; ++p) {
      d.images[i * kCifarPixels + p] = static_cast<float>(r[1 + p]) / 255.0f;
    }
  }
  return d;
}

// Reads a binary PPM (P6, maxval 255).
Tensor read_ppm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw Error("cannot open " + path.string());
  }
  auto token = [&]() {
    std::string t;
    char c;
    while (is.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(is, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(c);
    }
    return t;
  };
  if (token() != "P6") {
    throw FormatError(path.string() + ": not a binary PPM");
  }
  std::size_t w = 0, h = 0, maxv = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxv = std::stoul(token());
  } catch (const std::exception&) {
    throw FormatError(path.string() + ": malformed PPM header");
  }
  if (maxv != 255 || w == 0 || h == 0) {
    throw FormatError(path.string() + ": only 8-bit PPM is supported");
  }
  std::vector<unsigned char> px(w * h * 3);
  is.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (static_cast<std::size_t>(is.gcount()) != px.size()) {
    throw FormatError(path.string() + ": truncated PPM");
  }
  auto t = Tensor::uninitialized({3, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        t[(c * h + y) * w + x] = static_cast<float>(px[(y * w + x) * 3 + c]) / 255.0f;
      }
    }
  }
  return t;
}

LabeledDataset load_image_directory(const fs::path& dir) {
  const fs::path csv = dir / "labels.csv";
  if (!fs::exists(csv)) {
    throw FormatError(dir.string() + ": missing labels.csv");
  }
  std::ifstream is(csv);
  std::string line;
  std::vector<std::pair<std::string, std::size_t>> entries;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || (line_no == 1 && line.rfind("filename", 0) == 0)) {
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      throw FormatError(csv.string() + ":" + std::to_string(line_no) + ": malformed record");
    }
    std::size_t label = 0;
    try {
      label = std::stoul(line.substr(comma + 1));
    } catch (const std::exception&) {
      throw FormatError(csv.string() + ":" + std::to_string(line_no) + ": bad label");
    }
    entries.emplace_back(line.substr(0, comma), label);
  }
  if (entries.empty()) {
    throw FormatError(dir.string() + ": no images listed");
  }
  LabeledDataset d;
  std::vector<Tensor> imgs;
  for (const auto& [name, label] : entries) {
    if (label >= d.num_classes) {
      throw ValueError(dir.string() + ": label " + std::to_string(label) + " out of range");
    }
    imgs.push_back(read_ppm(dir / name));
    if (imgs.back().shape() != imgs.front().shape()) {
      throw FormatError(dir.string() + ": images differ in size");
    }
    d.labels.push_back(label);
  }
  const auto& s = imgs.front().shape();
  d.images = Tensor::uninitialized({imgs.size(), s[0], s[1], s[2]});
  const std::size_t per = imgs.front().numel();
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    std::copy_n(imgs[i].ptr(), per, d.images.ptr() + i * per);
  }
  return d;
}

} // namespace

LabeledDataset load_dataset(const std::string& path, DatasetFormat format) {
  if (format == DatasetFormat::Synthetic ||
      (format == DatasetFormat::Auto && path.rfind("synthetic:", 0) == 0)) {
    std::istringstream is(path.substr(path.find(':') + 1));
    std::size_t count = 0;
    std::uint64_t seed = 0;
    char sep = 0;
    if (!(is >> count >> sep >> seed) || sep != ':' || count == 0) {
      throw ConfigError("synthetic dataset spec must be synthetic:<count>:<seed>");
    }
    return make_shapes_dataset(count, seed);
  }
  if (format == DatasetFormat::Auto) {
    format = fs::is_directory(path) ? DatasetFormat::ImageDirectory : DatasetFormat::Cifar10Binary;
  }
  auto d = format == DatasetFormat::ImageDirectory ? load_image_directory(path) : load_cifar(path);
  d.validate();
  return d;
}

void save_cifar10_binary(const LabeledDataset& data, const fs::path& path) {
  if (data.images.rank() != 4 || data.images.dim(1) != 3 || data.images.dim(2) != kCifarSide ||
      data.images.dim(3) != kCifarSide) {
    throw ShapeError("cifar10-binary needs N×3×32×32 images");
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw Error("cannot open " + path.string() + " for writing");
  }
  std::vector<unsigned char> rec(1 + kCifarPixels);
  for (std::size_t i = 0; i < data.size(); ++i) {
    rec[0] = static_cast<unsigned char>(data.labels[i]);
    for (std::size_t p = 0; p < kCifarPixels; ++p) {
      rec[1 + p] = to_byte(data.images[i * kCifarPixels + p]);
    }
    os.write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
  }
}

void save_image_directory(const LabeledDataset& data, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream csv(dir / "labels.csv", std::ios::trunc);
  csv << "filename,label\n";
  const std::size_t c = data.images.dim(1), h = data.images.dim(2), w = data.images.dim(3);
  if (c != 3) {
    throw ShapeError("image directory export needs 3-channel images");
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::string name = std::to_string(i) + ".ppm";
    std::ofstream os(dir / name, std::ios::binary | std::ios::trunc);
    os << "P6\n" << w << ' ' << h << "\n255\n";
    std::vector<unsigned char> px(w * h * 3);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < 3; ++ch)
          px[(y * w + x) * 3 + ch] = to_byte(data.images[((i * 3 + ch) * h + y) * w + x]);
    os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
    csv << name << ',' << data.labels[i] << '\n';
  }
}

// ---------------------------------------------------------------------------
// shapes10

namespace {

// Signed coverage test for class `cls` at offset (dx, dy) from the shape
// center, in pixels; r is the shape radius.
bool inside(std::size_t cls, double dx, double dy, double r, double period) {
  const double d = std::hypot(dx, dy);
  const double box = std::max(std::abs(dx), std::abs(dy));
  const double arm = std::max(1.6, r * 0.28);
  switch (cls) {
    case 0:  // disk
      return d <= r;
    case 1:  // ring
      return std::abs(d - r * 0.8) <= arm * 0.7;
    case 2:  // square
      return box <= r * 0.8;
    case 3:  // square outline
      return std::abs(box - r * 0.75) <= arm * 0.6;
    case 4: {  // upward triangle
      const double h = r * 1.6;
      const double top = -h * 0.55, bottom = h * 0.45;
      if (dy < top || dy > bottom) return false;
      const double half = (dy - top) / h * r;
      return std::abs(dx) <= half;
    }
    case 5:  // plus
      return (std::abs(dx) <= arm && std::abs(dy) <= r) ||
             (std::abs(dy) <= arm && std::abs(dx) <= r);
    case 6: {  // diagonal cross
      const double a = std::abs(dx - dy) / std::numbers::sqrt2;
      const double b = std::abs(dx + dy) / std::numbers::sqrt2;
      return box <= r * 0.8 && (a <= arm * 0.8 || b <= arm * 0.8);
    }
    case 7:  // horizontal stripes in a disk
      return d <= r && std::sin(2 * std::numbers::pi * dy / period) > 0;
    case 8:  // vertical stripes in a disk
      return d <= r && std::sin(2 * std::numbers::pi * dx / period) > 0;
    case 9: {  // checkerboard in a square
      if (box > r * 0.85) return false;
      const auto cx = static_cast<long>(std::floor(dx / (period * 0.5)));
      const auto cy = static_cast<long>(std::floor(dy / (period * 0.5)));
      return ((cx + cy) & 1) == 0;
    }
    default:
      return false;
  }
}

} // namespace

LabeledDataset make_shapes_dataset(std::size_t count, std::uint64_t seed, std::size_t extent) {
  constexpr std::size_t kClasses = 10;
  LabeledDataset d;
  d.num_classes = kClasses;
  d.images = Tensor::uninitialized({count, 3, extent, extent});
  const double e = static_cast<double>(extent);
  const std::size_t plane = extent * extent;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = Rng::stream(seed, i);
    const std::size_t cls = rng.below(kClasses);
    d.labels.push_back(cls);
    std::array<double, 3> bg{}, fg{};
    for (auto& v : bg) v = rng.uniform(0.1, 0.9);
    do {
      for (auto& v : fg) v = rng.uniform(0.0, 1.0);
    } while (std::abs(fg[0] - bg[0]) + std::abs(fg[1] - bg[1]) + std::abs(fg[2] - bg[2]) < 0.9);
    const double r = rng.uniform(0.22, 0.36) * e;
    const double cx = rng.uniform(0.5 * e - 0.15 * e, 0.5 * e + 0.15 * e);
    const double cy = rng.uniform(0.5 * e - 0.15 * e, 0.5 * e + 0.15 * e);
    const double period = rng.uniform(0.16, 0.24) * e;
    const double grad_angle = rng.uniform(0, 2 * std::numbers::pi);
    const double grad_amp = rng.uniform(0.0, 0.25);
    const double noise = rng.uniform(0.01, 0.05);
    float* img = d.images.ptr() + i * 3 * plane;
    for (std::size_t y = 0; y < extent; ++y) {
      for (std::size_t x = 0; x < extent; ++x) {
        // 3×3 supersampled coverage
        int hits = 0;
        for (int sy = 0; sy < 3; ++sy) {
          for (int sx = 0; sx < 3; ++sx) {
            const double px = static_cast<double>(x) + (sx + 0.5) / 3.0 - cx;
            const double py = static_cast<double>(y) + (sy + 0.5) / 3.0 - cy;
            hits += inside(cls, px, py, r, period) ? 1 : 0;
          }
        }
        const double cov = hits / 9.0;
        const double u = ((static_cast<double>(x) - e / 2) * std::cos(grad_angle) +
                          (static_cast<double>(y) - e / 2) * std::sin(grad_angle)) /
                         e;
        for (std::size_t c = 0; c < 3; ++c) {
          const double back = bg[c] + grad_amp * u;
          double v = cov * fg[c] + (1 - cov) * back + noise * rng.normal();
          v = std::clamp(v, 0.0, 1.0);
          img[c * plane + y * extent + x] = static_cast<float>(std::lround(v * 255.0)) / 255.0f;
        }
      }
    }
  }
  return d;
}

LabeledDataset assign_targets(LabeledDataset data, TargetPolicy policy, std::uint64_t seed) {
  if (data.num_classes < 2) {
    throw ValueError("assign_targets: need at least two classes");
  }
  if (policy != TargetPolicy::UniformExcludingTrue) {
    throw ConfigError("assign_targets: unsupported policy");
  }
  data.targets.resize(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    Rng rng = Rng::stream(seed, i);
    // Uniform over the num_classes - 1 other classes.
    std::size_t t = rng.below(data.num_classes - 1);
    if (t >= data.labels[i]) {
      ++t;
    }
    data.targets[i] = t;
  }
  return data;
}

} // namespace tal
