#include "branchnet/augment.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "branchnet/random.hpp"

namespace branchnet {

namespace {

constexpr double kMaxPixel = 255.0;

double clamp_pixel(double v) { return std::clamp(v, 0.0, kMaxPixel); }

double luma(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

template <typename Img>
PcaBasis fit_basis(std::span<const Img> images) {
  std::array<double, 3> sum{};
  std::int64_t count = 0;
  for (const auto& img : images) {
    for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
      for (int c = 0; c < 3; ++c) sum[c] += static_cast<double>(img.pixels[i + c]) / kMaxPixel;
      ++count;
    }
  }
  if (count < 2) throw std::invalid_argument("fit_pca_basis: need at least 2 pixels");
  PcaBasis basis;
  for (int c = 0; c < 3; ++c) basis.channel_means[c] = sum[c] / static_cast<double>(count);

  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& img : images) {
    for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
      Eigen::Vector3d d;
      for (int c = 0; c < 3; ++c) d[c] = static_cast<double>(img.pixels[i + c]) / kMaxPixel - basis.channel_means[c];
      cov.noalias() += d * d.transpose();
    }
  }
  cov /= static_cast<double>(count - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> solver(cov);
  // Eigen sorts ascending.
  for (int i = 0; i < 3; ++i) {
    const int src = 2 - i;
    basis.eigenvalues[i] = std::max(0.0, solver.eigenvalues()[src]);
    Eigen::Vector3d v = solver.eigenvectors().col(src);
    int largest = 0;
    for (int c = 1; c < 3; ++c) {
      if (std::abs(v[c]) > std::abs(v[largest])) largest = c;
    }
    if (v[largest] < 0) v = -v;
    for (int c = 0; c < 3; ++c) basis.eigenvectors[i][c] = v[c];
  }
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) basis.covariance[r][c] = cov(r, c);
  }
  return basis;
}

template <typename Img>
void check_image(const Img& image, const char* op) {
  if (image.height < 1 || image.width < 1 ||
      image.pixels.size() != static_cast<std::size_t>(image.height) * image.width * 3) {
    throw std::invalid_argument(std::string(op) + ": malformed image");
  }
}

}  // namespace

Image to_float(const ByteImage& image) {
  Image out(image.height, image.width);
  std::transform(image.pixels.begin(), image.pixels.end(), out.pixels.begin(),
                 [](std::uint8_t v) { return static_cast<double>(v); });
  return out;
}

ByteImage to_bytes(const Image& image) {
  ByteImage out(image.height, image.width);
  std::transform(image.pixels.begin(), image.pixels.end(), out.pixels.begin(),
                 [](double v) { return static_cast<std::uint8_t>(std::lround(clamp_pixel(v))); });
  return out;
}

PcaBasis fit_pca_basis(std::span<const ByteImage> images) { return fit_basis(images); }
PcaBasis fit_pca_basis(std::span<const Image> images) { return fit_basis(images); }

RngStream::RngStream(std::uint64_t seed, std::uint64_t epoch, std::uint64_t sample_index, Technique technique)
    : engine_(keyed_engine({seed, epoch, sample_index, static_cast<std::uint64_t>(technique)})) {}

double RngStream::uniform() { return std::generate_canonical<double, 53>(engine_); }

double RngStream::uniform(double low, double high) { return low + (high - low) * uniform(); }

double RngStream::standard_normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }

int RngStream::uniform_int(int low, int high) { return std::uniform_int_distribution<int>(low, high)(engine_); }

Image pca_noise(const Image& image, const PcaBasis& basis, RngStream& rng, double sigma) {
  std::array<double, 3> alpha{};
  for (double& a : alpha) a = sigma * rng.standard_normal();
  std::array<double, 3> shift{};
  for (int i = 0; i < 3; ++i) {
    for (int c = 0; c < 3; ++c) shift[c] += alpha[i] * basis.eigenvalues[i] * basis.eigenvectors[i][c];
  }
  Image out = image;
  for (std::size_t i = 0; i < out.pixels.size(); i += 3) {
    for (int c = 0; c < 3; ++c) out.pixels[i + c] = clamp_pixel(out.pixels[i + c] + kMaxPixel * shift[c]);
  }
  return out;
}

Image adjust_brightness(const Image& image, double factor) {
  Image out = image;
  for (double& v : out.pixels) v *= factor;
  return out;
}

Image adjust_contrast(const Image& image, double factor) {
  double mean = 0.0;
  for (std::size_t i = 0; i < image.pixels.size(); i += 3) {
    mean += luma(image.pixels[i], image.pixels[i + 1], image.pixels[i + 2]);
  }
  mean /= static_cast<double>(image.pixels.size() / 3);
  Image out = image;
  for (double& v : out.pixels) v = factor * v + (1.0 - factor) * mean;
  return out;
}

Image adjust_saturation(const Image& image, double factor) {
  Image out = image;
  for (std::size_t i = 0; i < out.pixels.size(); i += 3) {
    const double gray = luma(image.pixels[i], image.pixels[i + 1], image.pixels[i + 2]);
    for (int c = 0; c < 3; ++c) out.pixels[i + c] = factor * image.pixels[i + c] + (1.0 - factor) * gray;
  }
  return out;
}

Image color_jitter(const Image& image, RngStream& rng, const JitterStrength& strength) {
  enum Kind { brightness, contrast, saturation };
  std::array<int, 3> order{brightness, contrast, saturation};
  std::shuffle(order.begin(), order.end(), rng.engine());
  const std::array<double, 3> s{strength.brightness, strength.contrast, strength.saturation};
  std::array<double, 3> factor{};
  for (int k = 0; k < 3; ++k) factor[k] = 1.0 + s[k] * (2.0 * rng.uniform() - 1.0);

  Image out = image;
  for (int kind : order) {
    switch (kind) {
      case brightness: out = adjust_brightness(out, factor[kind]); break;
      case contrast: out = adjust_contrast(out, factor[kind]); break;
      case saturation: out = adjust_saturation(out, factor[kind]); break;
    }
  }
  for (double& v : out.pixels) v = clamp_pixel(v);
  return out;
}

Image crop(const Image& image, int top, int left, int height, int width) {
  if (height < 1 || width < 1 || top < 0 || left < 0 || top + height > image.height ||
      left + width > image.width) {
    throw std::invalid_argument("crop: window " + std::to_string(height) + "x" + std::to_string(width) + " at (" +
                                std::to_string(top) + ", " + std::to_string(left) + ") exceeds image " +
                                std::to_string(image.height) + "x" + std::to_string(image.width));
  }
  Image out(height, width);
  for (int y = 0; y < height; ++y) {
    const auto* src = &image.pixels[(static_cast<std::size_t>(top + y) * image.width + left) * 3];
    std::copy(src, src + static_cast<std::size_t>(width) * 3, &out.pixels[static_cast<std::size_t>(y) * width * 3]);
  }
  return out;
}

Image center_crop(const Image& image, int height, int width) {
  if (height > image.height || width > image.width) {
    throw std::invalid_argument("center_crop: output larger than source");
  }
  return crop(image, (image.height - height) / 2, (image.width - width) / 2, height, width);
}

Image random_crop(const Image& image, int height, int width, RngStream& rng) {
  if (height > image.height || width > image.width) {
    throw std::invalid_argument("random_crop: output " + std::to_string(height) + "x" + std::to_string(width) +
                                " larger than source " + std::to_string(image.height) + "x" +
                                std::to_string(image.width));
  }
  const int top = rng.uniform_int(0, image.height - height);
  const int left = rng.uniform_int(0, image.width - width);
  return crop(image, top, left, height, width);
}

Image flip_horizontal(const Image& image) {
  Image out(image.height, image.width);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) out.at(y, image.width - 1 - x, c) = image.at(y, x, c);
    }
  }
  return out;
}

Image horizontal_flip(const Image& image, RngStream& rng, double probability) {
  if (probability < 0.0 || probability > 1.0) {
    throw std::invalid_argument("horizontal_flip: probability must lie in [0, 1]");
  }
  return rng.uniform() < probability ? flip_horizontal(image) : image;
}

Tensor normalize(const Image& image, const std::array<double, 3>& means,
                 const std::optional<std::array<double, 3>>& stds) {
  check_image(image, "normalize");
  if (stds) {
    for (double s : *stds) {
      if (!(s > 0.0)) throw std::invalid_argument("normalize: channel stds must be strictly positive");
    }
  }
  const auto plane = static_cast<std::size_t>(image.height) * image.width;
  std::vector<double> values(plane * 3);
  for (int c = 0; c < 3; ++c) {
    const double inv = stds ? 1.0 / (*stds)[c] : 1.0;
    for (std::size_t p = 0; p < plane; ++p) {
      const double centered = image.pixels[p * 3 + c] - means[c];
      values[c * plane + p] = stds ? centered * inv : centered;
    }
  }
  return Tensor({3, image.height, image.width}, std::move(values));
}

std::vector<std::int64_t> epoch_shuffle(std::int64_t n, std::uint64_t epoch, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("epoch_shuffle: n must be at least 1");
  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  auto engine = keyed_engine({seed, epoch, 0x5348554646ULL});
  std::shuffle(perm.begin(), perm.end(), engine);
  return perm;
}

void AugmentConfig::validate() const {
  if (crop_height < 1 || crop_width < 1) throw std::invalid_argument("crop size must be positive");
  if (flip_probability < 0.0 || flip_probability > 1.0) {
    throw std::invalid_argument("flip_probability must lie in [0, 1]");
  }
  if (pca_sigma < 0.0) throw std::invalid_argument("pca_sigma must be non-negative");
  if (jitter.brightness < 0.0 || jitter.saturation < 0.0 || jitter.contrast < 0.0) {
    throw std::invalid_argument("jitter strengths must be non-negative");
  }
  if (channel_stds) {
    for (double s : *channel_stds) {
      if (!(s > 0.0)) throw std::invalid_argument("channel_stds must be strictly positive");
    }
  }
}

Image augment_image(const Image& image, const AugmentConfig& config, const PcaBasis* basis,
                    const SampleKey& key) {
  check_image(image, "augment");
  Image out;
  if (config.enable_crop) {
    auto rng = key.stream(Technique::crop);
    out = random_crop(image, config.crop_height, config.crop_width, rng);
  } else {
    out = center_crop(image, config.crop_height, config.crop_width);
  }
  if (config.enable_flip) {
    auto rng = key.stream(Technique::flip);
    out = horizontal_flip(out, rng, config.flip_probability);
  }
  if (config.enable_jitter) {
    auto rng = key.stream(Technique::jitter);
    out = color_jitter(out, rng, config.jitter);
  }
  if (config.enable_pca) {
    if (!basis) throw std::invalid_argument("augment: PCA noise enabled without a fitted basis");
    auto rng = key.stream(Technique::pca);
    out = pca_noise(out, *basis, rng, config.pca_sigma);
  }
  return out;
}

Tensor augment_pipeline(const Image& image, const AugmentConfig& config, const PcaBasis* basis,
                        const SampleKey& key) {
  const Image augmented = augment_image(image, config, basis, key);
  if (!config.enable_normalize) return normalize(augmented, {0.0, 0.0, 0.0});
  return normalize(augmented, config.channel_means.value_or(std::array<double, 3>{}), config.channel_stds);
}

Tensor eval_transform(const Image& image, const AugmentConfig& config) {
  const Image cropped = center_crop(image, config.crop_height, config.crop_width);
  if (!config.enable_normalize) return normalize(cropped, {0.0, 0.0, 0.0});
  return normalize(cropped, config.channel_means.value_or(std::array<double, 3>{}), config.channel_stds);
}

std::array<double, 3> channel_means(std::span<const ByteImage> images) {
  std::array<double, 3> sum{};
  std::int64_t count = 0;
  for (const auto& img : images) {
    for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
      for (int c = 0; c < 3; ++c) sum[c] += img.pixels[i + c];
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("channel_means: no pixels");
  for (double& s : sum) s /= static_cast<double>(count);
  return sum;
}

std::array<double, 3> channel_stds(std::span<const ByteImage> images, const std::array<double, 3>& means) {
  std::array<double, 3> sq{};
  std::int64_t count = 0;
  for (const auto& img : images) {
    for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
      for (int c = 0; c < 3; ++c) {
        const double d = img.pixels[i + c] - means[c];
        sq[c] += d * d;
      }
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("channel_stds: no pixels");
  for (double& s : sq) s = std::sqrt(s / static_cast<double>(count));
  return sq;
}

}  // namespace branchnet
