#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "branchnet/image.hpp"
#include "branchnet/tensor.hpp"

namespace branchnet {

/// Eigensystem of the RGB covariance of a training set. Colors are measured
/// on the unit scale (byte value / 255), the convention of the fancy-PCA
/// lineage, so eigenvalues are dimensionless.
struct PcaBasis {
  std::array<double, 3> eigenvalues{};                 // descending, non-negative
  std::array<std::array<double, 3>, 3> eigenvectors{}; // eigenvectors[i] pairs with eigenvalues[i]
  std::array<double, 3> channel_means{};               // unit scale
  std::array<std::array<double, 3>, 3> covariance{};   // pooled sample covariance, unit scale
};

/// Pooled covariance over every pixel of every image, eigendecomposed.
PcaBasis fit_pca_basis(std::span<const ByteImage> images);
PcaBasis fit_pca_basis(std::span<const Image> images);

enum class Technique : std::uint64_t { crop = 1, flip = 2, jitter = 3, pca = 4 };

/// Random stream keyed by (global seed, epoch, sample index, technique).
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t epoch, std::uint64_t sample_index, Technique technique);

  double uniform();                       // [0, 1)
  double uniform(double low, double high);
  double standard_normal();
  int uniform_int(int low, int high);     // inclusive
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

struct SampleKey {
  std::uint64_t seed = 0;
  std::uint64_t epoch = 0;
  std::uint64_t sample_index = 0;

  RngStream stream(Technique technique) const { return RngStream(seed, epoch, sample_index, technique); }
};

Image pca_noise(const Image& image, const PcaBasis& basis, RngStream& rng, double sigma);

struct JitterStrength {
  double brightness = 0.4;
  double saturation = 0.4;
  double contrast = 0.4;

  bool operator==(const JitterStrength&) const = default;
};

// Deterministic color adjustments; none of them clamp.
Image adjust_brightness(const Image& image, double factor);
Image adjust_contrast(const Image& image, double factor);
Image adjust_saturation(const Image& image, double factor);

/// Applies brightness, contrast and saturation in a random order with
/// factors drawn from Uniform[1 - s, 1 + s], then clamps to [0, 255].
Image color_jitter(const Image& image, RngStream& rng, const JitterStrength& strength);

Image crop(const Image& image, int top, int left, int height, int width);
Image center_crop(const Image& image, int height, int width);
Image random_crop(const Image& image, int height, int width, RngStream& rng);

Image flip_horizontal(const Image& image);
Image horizontal_flip(const Image& image, RngStream& rng, double probability);

/// Subtracts per-channel means (and divides by stds when given), producing a
/// [3, H, W] tensor. Means and stds are on the 0..255 pixel scale.
Tensor normalize(const Image& image, const std::array<double, 3>& means,
                 const std::optional<std::array<double, 3>>& stds = std::nullopt);

/// Permutation of 0..n-1 determined by (n, epoch, seed).
std::vector<std::int64_t> epoch_shuffle(std::int64_t n, std::uint64_t epoch, std::uint64_t seed);

struct AugmentConfig {
  int crop_height = 32;
  int crop_width = 32;
  double flip_probability = 0.5;
  double pca_sigma = 0.1;
  JitterStrength jitter;
  bool enable_crop = true;
  bool enable_flip = true;
  bool enable_jitter = true;
  bool enable_pca = true;
  bool enable_normalize = true;
  /// Unset means: fitted from the training set when training starts.
  std::optional<std::array<double, 3>> channel_means;
  std::optional<std::array<double, 3>> channel_stds;

  void validate() const;
  bool operator==(const AugmentConfig&) const = default;
};

/// Stages before normalization: crop, flip, jitter, PCA noise. The result
/// stays within [0, 255]. With cropping disabled the image is center
/// cropped to the configured size.
Image augment_image(const Image& image, const AugmentConfig& config, const PcaBasis* basis,
                    const SampleKey& key);

/// Full training-time transform producing a [3, crop_height, crop_width] tensor.
Tensor augment_pipeline(const Image& image, const AugmentConfig& config, const PcaBasis* basis,
                        const SampleKey& key);

/// Evaluation-time transform: center crop and normalize, nothing random.
Tensor eval_transform(const Image& image, const AugmentConfig& config);

/// Per-channel pixel mean over a set of images, 0..255 scale.
std::array<double, 3> channel_means(std::span<const ByteImage> images);
std::array<double, 3> channel_stds(std::span<const ByteImage> images, const std::array<double, 3>& means);

}  // namespace branchnet
