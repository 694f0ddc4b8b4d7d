#include "branchnet/data_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

#include "branchnet/random.hpp"

namespace branchnet {

namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class Writer {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buffer_.insert(buffer_.end(), p, p + n);
  }
  template <typename T>
  void le(T value) {
    std::uint64_t bits;
    if constexpr (std::is_same_v<T, double>) {
      bits = std::bit_cast<std::uint64_t>(value);
    } else {
      bits = static_cast<std::uint64_t>(value);
    }
    for (std::size_t i = 0; i < sizeof(T); ++i) buffer_.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  const std::vector<std::uint8_t>& buffer() const { return buffer_; }

 private:
  std::vector<std::uint8_t> buffer_;
};

class Reader {
 public:
  explicit Reader(std::vector<std::uint8_t> data) : data_(std::move(data)) {}

  void need(std::size_t n, const std::string& record) const {
    if (pos_ + n > data_.size()) throw FormatError("checkpoint truncated while reading " + record);
  }
  template <typename T>
  T le(const std::string& record) {
    need(sizeof(T), record);
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    if constexpr (std::is_same_v<T, double>) {
      return std::bit_cast<double>(bits);
    } else if constexpr (std::is_same_v<T, float>) {
      return std::bit_cast<float>(static_cast<std::uint32_t>(bits));
    } else {
      return static_cast<T>(bits);
    }
  }
  std::string str(std::size_t n, const std::string& record) {
    need(n, record);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::vector<std::uint8_t> data_;
  std::size_t pos_ = 0;
};

}  // namespace

void Dataset::validate() const {
  if (images.size() != labels.size()) {
    throw FormatError("dataset has " + std::to_string(images.size()) + " images but " +
                      std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw FormatError("label " + std::to_string(labels[i]) + " of sample " + std::to_string(i) +
                        " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

Dataset Dataset::head(std::size_t count) const {
  Dataset out = *this;
  const auto n = std::min(count, size());
  out.images.resize(n);
  out.labels.resize(n);
  return out;
}

Dataset load_cifar10_file(const fs::path& file) {
  const auto bytes = read_all(file);
  if (bytes.size() % kCifarRecordBytes != 0) {
    throw FormatError(file.string() + ": length " + std::to_string(bytes.size()) + " is not a multiple of " +
                      std::to_string(kCifarRecordBytes));
  }
  Dataset ds;
  ds.num_classes = kCifarClasses;
  ds.height = ds.width = kCifarSide;
  ds.source = file.string();
  constexpr std::size_t plane = kCifarSide * kCifarSide;
  for (std::size_t r = 0; r < bytes.size() / kCifarRecordBytes; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] >= kCifarClasses) {
      throw FormatError(file.string() + ": record " + std::to_string(r) + " has label " + std::to_string(rec[0]));
    }
    ByteImage img(kCifarSide, kCifarSide);
    for (std::size_t p = 0; p < plane; ++p) {
      for (int c = 0; c < 3; ++c) img.pixels[p * 3 + c] = rec[1 + c * plane + p];
    }
    ds.images.push_back(std::move(img));
    ds.labels.push_back(rec[0]);
  }
  return ds;
}

Dataset load_cifar10_binary(const fs::path& directory, Split split, std::optional<std::size_t> max_samples) {
  std::vector<fs::path> files;
  if (split == Split::train) {
    for (int i = 1; i <= 5; ++i) {
      auto p = directory / ("data_batch_" + std::to_string(i) + ".bin");
      if (fs::exists(p)) files.push_back(p);
    }
  } else if (fs::exists(directory / "test_batch.bin")) {
    files.push_back(directory / "test_batch.bin");
  }
  if (files.empty()) {
    throw FormatError("no CIFAR-10 " + std::string(split == Split::train ? "training" : "test") +
                      " batches found in " + directory.string());
  }
  Dataset ds;
  ds.num_classes = kCifarClasses;
  ds.height = ds.width = kCifarSide;
  ds.split = split == Split::train ? "train" : "test";
  ds.source = directory.string();
  for (const auto& f : files) {
    auto part = load_cifar10_file(f);
    for (std::size_t i = 0; i < part.size(); ++i) {
      if (max_samples && ds.size() >= *max_samples) return ds;
      ds.images.push_back(std::move(part.images[i]));
      ds.labels.push_back(part.labels[i]);
    }
  }
  return ds;
}

namespace {

struct ClassLayout {
  std::array<std::uint8_t, 3> color;
  int top, left, height, width;
};

ClassLayout class_layout(const SyntheticSpec& spec, int label) {
  // Hues spread around the color wheel; rectangles walk a 3x3 grid of
  // anchor positions so neighboring classes differ in both cues.
  const double hue = 6.0 * static_cast<double>(label) / spec.num_classes;
  const int sector = static_cast<int>(hue);
  const double frac = hue - sector;
  const double hi = 230.0, lo = 25.0;
  const double rise = lo + (hi - lo) * frac, fall = hi - (hi - lo) * frac;
  std::array<double, 3> rgb{};
  switch (sector % 6) {
    case 0: rgb = {hi, rise, lo}; break;
    case 1: rgb = {fall, hi, lo}; break;
    case 2: rgb = {lo, hi, rise}; break;
    case 3: rgb = {lo, fall, hi}; break;
    case 4: rgb = {rise, lo, hi}; break;
    default: rgb = {hi, lo, fall}; break;
  }
  ClassLayout layout;
  for (int c = 0; c < 3; ++c) {
    const double v = 128.0 + spec.signal_strength * (rgb[c] - 128.0);
    layout.color[c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
  }
  const int size = spec.image_size;
  layout.height = std::max(1, size / 2 - (label % 2) * (size / 8));
  layout.width = std::max(1, size / 2 - ((label / 2) % 2) * (size / 8));
  const int cell = label % 9;
  layout.top = (cell / 3) * (size - layout.height) / 2;
  layout.left = (cell % 3) * (size - layout.width) / 2;
  return layout;
}

}  // namespace

ByteImage synthetic_template(const SyntheticSpec& spec, int label) {
  const auto layout = class_layout(spec, label);
  ByteImage img(spec.image_size, spec.image_size);
  std::fill(img.pixels.begin(), img.pixels.end(), std::uint8_t{128});
  for (int y = layout.top; y < layout.top + layout.height; ++y) {
    for (int x = layout.left; x < layout.left + layout.width; ++x) {
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = layout.color[c];
    }
  }
  return img;
}

Dataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed, const std::string& split) {
  if (spec.num_classes < 2) throw std::invalid_argument("synthetic data needs at least 2 classes");
  if (spec.samples_per_class < 1 || spec.image_size < 1) {
    throw std::invalid_argument("synthetic samples_per_class and image_size must be positive");
  }
  if (spec.noise_std < 0.0) throw std::invalid_argument("synthetic noise_std must be non-negative");
  if (!(spec.signal_strength >= 0.0 && spec.signal_strength <= 1.0)) {
    throw std::invalid_argument("synthetic signal_strength must lie in [0, 1]");
  }
  if (!(spec.label_noise >= 0.0 && spec.label_noise <= 1.0)) {
    throw std::invalid_argument("synthetic label_noise must lie in [0, 1]");
  }
  std::vector<ByteImage> templates;
  for (int c = 0; c < spec.num_classes; ++c) templates.push_back(synthetic_template(spec, c));

  std::uint64_t split_tag = 0;
  for (char ch : split) split_tag = split_tag * 131 + static_cast<unsigned char>(ch);
  auto rng = keyed_engine({seed, split_tag});
  std::normal_distribution<double> noise(0.0, 1.0);
  auto label_rng = keyed_engine({seed, split_tag, 0x4c4142454cULL});
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<int> other(1, spec.num_classes - 1);

  Dataset ds;
  ds.num_classes = spec.num_classes;
  ds.height = ds.width = spec.image_size;
  ds.split = split;
  ds.source = "synthetic";
  for (int i = 0; i < spec.samples_per_class; ++i) {
    for (int c = 0; c < spec.num_classes; ++c) {
      ByteImage img = templates[c];
      if (spec.noise_std > 0.0) {
        for (auto& v : img.pixels) {
          const double value = v + spec.noise_std * noise(rng);
          v = static_cast<std::uint8_t>(std::lround(std::clamp(value, 0.0, 255.0)));
        }
      }
      ds.images.push_back(std::move(img));
      const bool flip = coin(label_rng) < spec.label_noise;
      const int shift = other(label_rng);
      ds.labels.push_back(flip ? (c + shift) % spec.num_classes : c);
    }
  }
  return ds;
}

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const fs::path& path, const Checkpoint& checkpoint) {
  Writer w;
  w.bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.le<std::uint32_t>(checkpoint.version);
  w.le<std::uint64_t>(checkpoint.header_json.size());
  w.bytes(checkpoint.header_json.data(), checkpoint.header_json.size());
  w.le<std::uint64_t>(checkpoint.tensors.size());
  for (const auto& t : checkpoint.tensors) {
    if (numel(t.shape) != static_cast<std::int64_t>(t.values.size())) {
      throw FormatError("tensor " + t.name + " has inconsistent shape");
    }
    w.le<std::uint32_t>(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.le<std::uint8_t>(kDtypeFloat64);
    w.le<std::uint8_t>(static_cast<std::uint8_t>(t.shape.size()));
    for (auto extent : t.shape) w.le<std::int64_t>(extent);
    for (double v : t.values) w.le<double>(v);
  }

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(w.buffer().data()), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw FormatError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  Reader r(read_all(path));
  const std::string magic = r.str(sizeof(kCheckpointMagic), "magic");
  if (magic != std::string(kCheckpointMagic, sizeof(kCheckpointMagic))) {
    throw FormatError(path.string() + ": bad magic, not a checkpoint");
  }
  Checkpoint ck;
  ck.version = r.le<std::uint32_t>("version");
  if (ck.version != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(ck.version));
  }
  const auto header_len = r.le<std::uint64_t>("header length");
  ck.header_json = r.str(header_len, "header");
  const auto count = r.le<std::uint64_t>("tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string record = "tensor #" + std::to_string(i);
    CheckpointTensor t;
    const auto name_len = r.le<std::uint32_t>(record + " name length");
    t.name = r.str(name_len, record + " name");
    const auto dtype = r.le<std::uint8_t>(t.name + " dtype");
    if (dtype != kDtypeFloat64 && dtype != kDtypeFloat32) {
      throw FormatError("tensor " + t.name + " has unknown dtype tag " + std::to_string(dtype));
    }
    const auto rank = r.le<std::uint8_t>(t.name + " rank");
    for (int d = 0; d < rank; ++d) {
      const auto extent = r.le<std::int64_t>(t.name + " shape");
      if (extent <= 0) throw FormatError("tensor " + t.name + " has non-positive extent");
      t.shape.push_back(extent);
    }
    const auto n = static_cast<std::size_t>(numel(t.shape));
    r.need(n * (dtype == kDtypeFloat64 ? 8 : 4), t.name + " payload");
    t.values.resize(n);
    for (auto& v : t.values) v = dtype == kDtypeFloat64 ? r.le<double>(t.name) : r.le<float>(t.name);
    ck.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw FormatError(path.string() + ": trailing bytes after tensor table");
  return ck;
}

ByteImage read_ppm(const fs::path& path) {
  const auto bytes = read_all(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') t.push_back(static_cast<char>(bytes[pos++]));
    return t;
  };
  if (token() != "P6") throw FormatError(path.string() + ": not a binary PPM (P6)");
  int width = 0, height = 0, maxval = 0;
  try {
    width = std::stoi(token());
    height = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw FormatError(path.string() + ": malformed PPM header");
  }
  if (width < 1 || height < 1 || maxval != 255) throw FormatError(path.string() + ": unsupported PPM geometry");
  ++pos;  // single whitespace before raster
  const std::size_t need = static_cast<std::size_t>(width) * height * 3;
  if (bytes.size() < pos + need) throw FormatError(path.string() + ": truncated PPM raster");
  ByteImage img(height, width);
  std::copy(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
            bytes.begin() + static_cast<std::ptrdiff_t>(pos + need), img.pixels.begin());
  return img;
}

void write_ppm(const fs::path& path, const ByteImage& image) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
}

}  // namespace branchnet
