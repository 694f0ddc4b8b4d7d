#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "branchnet/image.hpp"
#include "branchnet/tensor.hpp"

namespace branchnet {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  std::vector<ByteImage> images;
  std::vector<int> labels;
  int num_classes = 0;
  int height = 0;
  int width = 0;
  std::string split;
  std::string source;

  std::size_t size() const { return images.size(); }
  void validate() const;
  /// First `count` samples (or all, if fewer).
  Dataset head(std::size_t count) const;
};

// CIFAR-10 binary records: 1 label byte, then 1024 R, 1024 G, 1024 B bytes
// (row-major 32x32 planes).
constexpr std::size_t kCifarRecordBytes = 3073;
constexpr int kCifarSide = 32;
constexpr int kCifarClasses = 10;

Dataset load_cifar10_file(const std::filesystem::path& file);

enum class Split { train, test };

/// Reads data_batch_1..5.bin (train) or test_batch.bin (test) from
/// `directory`, in that order, keeping at most `max_samples`.
Dataset load_cifar10_binary(const std::filesystem::path& directory, Split split,
                            std::optional<std::size_t> max_samples = std::nullopt);

struct SyntheticSpec {
  int num_classes = 10;
  int samples_per_class = 50;
  int image_size = 32;
  double noise_std = 8.0;
  /// Fraction of samples whose label is replaced by a different, uniformly
  /// drawn class. The image still shows the original class.
  double label_noise = 0.0;
  /// Rectangle color is 128 + signal_strength * (hue color - 128).
  double signal_strength = 1.0;

  bool operator==(const SyntheticSpec&) const = default;
};

/// Class c is a colored axis-aligned rectangle on a gray background. Color
/// and placement depend only on c; per-pixel Gaussian noise depends on the
/// seed. Samples are interleaved by class (0, 1, ..., K-1, 0, 1, ...).
Dataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed, const std::string& split = "train");

/// Noise-free rendering of a class, the template the generator perturbs.
ByteImage synthetic_template(const SyntheticSpec& spec, int label);

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

/// "BRNCHNET", u32 version, u64-prefixed JSON header, u64 tensor count, then
/// per tensor: u32-prefixed name, u8 dtype, u8 rank, i64 extents, payload.
/// All integers and floats little-endian.
struct Checkpoint {
  std::uint32_t version = 1;
  std::string header_json;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const;
};

inline constexpr char kCheckpointMagic[8] = {'B', 'R', 'N', 'C', 'H', 'N', 'E', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDtypeFloat32 = 0;
inline constexpr std::uint8_t kDtypeFloat64 = 1;

/// Writes to a temporary file and renames it over `path`.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

ByteImage read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const ByteImage& image);

}  // namespace branchnet
