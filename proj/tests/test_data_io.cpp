#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "branchnet/data_io.hpp"
#include "doctest.h"

using namespace branchnet;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("branchnet_io_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<std::uint8_t> random_records(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(n) * 3073);
  for (int r = 0; r < n; ++r) {
    bytes[r * 3073] = static_cast<std::uint8_t>(rng() % 10);
    for (int i = 1; i < 3073; ++i) bytes[r * 3073 + i] = static_cast<std::uint8_t>(rng() % 256);
  }
  return bytes;
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(p, std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<char> read_all(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

Checkpoint sample_checkpoint() {
  Checkpoint ck;
  ck.version = kCheckpointVersion;
  ck.header_json = R"({"note":"x"})";
  ck.tensors.push_back({"a.weight", {2, 3}, {1, -2.5, 3.25, 1e-300, -0.0, 6}});
  ck.tensors.push_back({"b", {1}, {std::nextafter(1.0, 2.0)}});
  return ck;
}

}  // namespace

TEST_CASE("CIFAR record arithmetic and layout") {
  TempDir dir;
  auto bytes = random_records(2, 1);
  CHECK(bytes.size() == 6146);
  write_bytes(dir.path / "two.bin", bytes);
  const Dataset ds = load_cifar10_file(dir.path / "two.bin");
  CHECK(ds.size() == 2);
  CHECK(ds.images[0].at(0, 0, 0) == bytes[1]);
}

TEST_CASE("CIFAR loader matches byte slicing of a 10-record file") {
  TempDir dir;
  const auto bytes = random_records(10, 2);
  write_bytes(dir.path / "data_batch_1.bin", bytes);
  const Dataset ds = load_cifar10_binary(dir.path, Split::train);
  REQUIRE(ds.size() == 10);
  for (int r = 0; r < 10; ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * 3073;
    CHECK(ds.labels[r] == bytes[base]);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        for (int c = 0; c < 3; ++c) {
          if (ds.images[r].at(y, x, c) != bytes[base + 1 + c * 1024 + y * 32 + x]) {
            FAIL("mismatch at record " << r << " (" << y << ", " << x << ", " << c << ")");
          }
        }
  }
  CHECK(load_cifar10_binary(dir.path, Split::train, 4).size() == 4);
  CHECK_THROWS_AS(load_cifar10_binary(dir.path, Split::test), FormatError);
}

TEST_CASE("CIFAR loader rejects bad lengths and labels") {
  TempDir dir;
  auto bytes = random_records(2, 3);
  bytes.pop_back();
  write_bytes(dir.path / "short.bin", bytes);
  CHECK_THROWS_WITH_AS(load_cifar10_file(dir.path / "short.bin"), doctest::Contains("3073"), FormatError);
  auto bad = random_records(2, 4);
  bad[3073] = 10;
  write_bytes(dir.path / "label.bin", bad);
  CHECK_THROWS_WITH_AS(load_cifar10_file(dir.path / "label.bin"), doctest::Contains("record 1"), FormatError);
}

TEST_CASE("synthetic data is deterministic and noise-free classes are constant") {
  SyntheticSpec spec;
  spec.samples_per_class = 3;
  const Dataset a = generate_synthetic(spec, 5), b = generate_synthetic(spec, 5);
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  CHECK(generate_synthetic(spec, 6).images != a.images);
  spec.noise_std = 0.0;
  const Dataset clean = generate_synthetic(spec, 5);
  for (std::size_t i = 0; i < clean.size(); ++i) {
    CHECK(clean.images[i] == synthetic_template(spec, clean.labels[i]));
  }
  CHECK(clean.labels[0] == 0);
  CHECK(clean.labels[1] == 1);
}

TEST_CASE("synthetic data is separable by nearest template at noise 8") {
  SyntheticSpec spec;
  spec.samples_per_class = 30;
  spec.noise_std = 8.0;
  const Dataset ds = generate_synthetic(spec, 11, "test");
  std::vector<ByteImage> templates;
  for (int c = 0; c < spec.num_classes; ++c) templates.push_back(synthetic_template(spec, c));
  int correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    int best = -1;
    double best_d = INFINITY;
    for (int c = 0; c < spec.num_classes; ++c) {
      double d = 0.0;
      for (std::size_t p = 0; p < ds.images[i].pixels.size(); ++p) {
        d += std::pow(double(ds.images[i].pixels[p]) - double(templates[c].pixels[p]), 2);
      }
      if (d < best_d) best_d = d, best = c;
    }
    correct += best == ds.labels[i];
  }
  CHECK(static_cast<double>(correct) / ds.size() > 0.95);
}

TEST_CASE("synthetic label noise flips roughly the requested fraction") {
  SyntheticSpec spec;
  spec.samples_per_class = 100;
  spec.label_noise = 0.2;
  const Dataset ds = generate_synthetic(spec, 1);
  int flipped = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) flipped += ds.labels[i] != static_cast<int>(i % 10);
  CHECK(std::abs(flipped / 1000.0 - 0.2) < 0.05);
}

TEST_CASE("checkpoint round trip is bitwise") {
  TempDir dir;
  const Checkpoint ck = sample_checkpoint();
  save_checkpoint(dir.path / "ck.bin", ck);
  const Checkpoint back = load_checkpoint(dir.path / "ck.bin");
  CHECK(back.version == ck.version);
  CHECK(back.header_json == ck.header_json);
  REQUIRE(back.tensors.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back.tensors[i].name == ck.tensors[i].name);
    CHECK(back.tensors[i].shape == ck.tensors[i].shape);
    CHECK(std::memcmp(back.tensors[i].values.data(), ck.tensors[i].values.data(),
                      ck.tensors[i].values.size() * sizeof(double)) == 0);
  }
  save_checkpoint(dir.path / "ck2.bin", back);
  CHECK(read_all(dir.path / "ck.bin") == read_all(dir.path / "ck2.bin"));
  CHECK_FALSE(fs::exists(dir.path / "ck.bin.tmp"));
}

TEST_CASE("checkpoint integrity errors") {
  TempDir dir;
  save_checkpoint(dir.path / "ck.bin", sample_checkpoint());
  auto bytes = read_all(dir.path / "ck.bin");

  auto truncated = bytes;
  truncated.pop_back();
  std::ofstream(dir.path / "t.bin", std::ios::binary).write(truncated.data(), truncated.size());
  CHECK_THROWS_WITH_AS(load_checkpoint(dir.path / "t.bin"), doctest::Contains("reading b payload"), FormatError);

  // Cut inside the first tensor's payload: the message names that record.
  auto cut = bytes;
  cut.resize(bytes.size() - 8 * 1 - 60);
  std::ofstream(dir.path / "c.bin", std::ios::binary).write(cut.data(), cut.size());
  CHECK_THROWS_WITH_AS(load_checkpoint(dir.path / "c.bin"), doctest::Contains("a.weight payload"), FormatError);

  auto magic = bytes;
  magic[0] = 'X';
  std::ofstream(dir.path / "m.bin", std::ios::binary).write(magic.data(), magic.size());
  CHECK_THROWS_WITH_AS(load_checkpoint(dir.path / "m.bin"), doctest::Contains("magic"), FormatError);

  auto version = bytes;
  version[8] = 7;
  std::ofstream(dir.path / "v.bin", std::ios::binary).write(version.data(), version.size());
  CHECK_THROWS_WITH_AS(load_checkpoint(dir.path / "v.bin"), doctest::Contains("version"), FormatError);

  CHECK_THROWS_AS(load_checkpoint(dir.path / "missing.bin"), FormatError);
}

TEST_CASE("PPM round trip and errors") {
  TempDir dir;
  ByteImage img(3, 4);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>(i * 7);
  write_ppm(dir.path / "a.ppm", img);
  CHECK(read_ppm(dir.path / "a.ppm") == img);
  std::ofstream(dir.path / "bad.ppm") << "P3\n1 1\n255\n0 0 0\n";
  CHECK_THROWS_AS(read_ppm(dir.path / "bad.ppm"), FormatError);
  CHECK_THROWS_AS(read_ppm(dir.path / "none.ppm"), FormatError);
}
