#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tima/error.hpp"
#include "tima/io.hpp"
#include "tima/tensor.hpp"

namespace tima {

/// Parameters of the hierarchical generator: superclasses own a random
/// base pattern, subclasses perturb it, samples add pixel noise.
struct SyntheticSpec {
  std::size_t num_superclasses = 4;
  std::size_t subclasses_per_superclass = 2;
  std::size_t image_side = 16;
  double within_super_shift = 0.15;
  double noise_sigma = 0.08;
  std::size_t train_count = 2000;
  std::size_t test_count = 500;
  std::uint64_t seed = 0;

  std::size_t num_classes() const noexcept { return num_superclasses * subclasses_per_superclass; }
  std::size_t pixels() const noexcept { return image_side * image_side; }

  void validate() const {
    if (num_superclasses < 1 || subclasses_per_superclass < 1 || image_side < 1 || train_count < 1 || test_count < 1) {
      throw Error(ErrorCode::InvalidSpec, "counts must be >= 1");
    }
    if (!(noise_sigma >= 0.0)) throw Error(ErrorCode::InvalidSpec, "noise_sigma must be >= 0");
    if (!(within_super_shift >= 0.0)) throw Error(ErrorCode::InvalidSpec, "within_super_shift must be >= 0");
    if (num_classes() > 0xFFFF) throw Error(ErrorCode::InvalidSpec, "too many classes for the file format");
  }

  friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;
};

enum class Split : std::uint8_t { train, test, probe };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::test: return "test";
    case Split::probe: return "probe";
  }
  return "?";
}

struct Dataset {
  Tensor images;  // N x image_side^2, values in [0, 1]
  std::vector<std::size_t> labels;
  std::vector<std::size_t> superclass_of;  // class id -> superclass id
  std::size_t num_superclasses = 0;
  std::size_t image_side = 0;
  Split split = Split::train;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t num_classes() const noexcept { return superclass_of.size(); }
  std::size_t pixels() const noexcept { return image_side * image_side; }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

namespace detail {

inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t stream_id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream_id), 0x7449u};
  return std::mt19937_64(seq);
}

// Stream ids; train and test never share one.
inline constexpr std::uint64_t kPrototypeStream = 0;
inline constexpr std::uint64_t kTrainStream = 1;
inline constexpr std::uint64_t kTestStream = 2;
inline constexpr std::uint64_t kProbeSampleStream = 3;
inline constexpr std::uint64_t kProbeShiftStream = 4;

inline double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

inline Dataset sample_split(const SyntheticSpec& spec, const Tensor& prototypes, std::size_t count, std::uint64_t stream_id,
                            Split split) {
  auto rng = stream(spec.seed, stream_id);
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::size_t c = spec.num_classes(), p = spec.pixels();
  Dataset d;
  d.images = Tensor::zeros(count, p);
  d.labels.resize(count);
  d.superclass_of.resize(c);
  for (std::size_t k = 0; k < c; ++k) d.superclass_of[k] = k / spec.subclasses_per_superclass;
  d.num_superclasses = spec.num_superclasses;
  d.image_side = spec.image_side;
  d.split = split;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t y = i % c;
    d.labels[i] = y;
    for (std::size_t j = 0; j < p; ++j) d.images(i, j) = quantize(prototypes(y, j) + spec.noise_sigma * noise(rng));
  }
  return d;
}

}  // namespace detail

/// Per-pixel standard deviation of the seeded subclass perturbation, which
/// within_super_shift then scales.
inline constexpr double kSubclassPerturbationStd = 0.3;

/// Class prototypes (num_classes x pixels), before noise and clamping.
/// Class k belongs to superclass k / subclasses_per_superclass.
inline Tensor synthetic_prototypes(const SyntheticSpec& spec) {
  spec.validate();
  auto rng = detail::stream(spec.seed, detail::kPrototypeStream);
  std::uniform_real_distribution<double> base_dist(0.0, 1.0);
  std::normal_distribution<double> shift_dist(0.0, kSubclassPerturbationStd);
  const std::size_t p = spec.pixels();
  Tensor protos = Tensor::zeros(spec.num_classes(), p);
  std::vector<double> base(p);
  for (std::size_t s = 0; s < spec.num_superclasses; ++s) {
    for (double& v : base) v = base_dist(rng);
    for (std::size_t sub = 0; sub < spec.subclasses_per_superclass; ++sub) {
      const std::size_t k = s * spec.subclasses_per_superclass + sub;
      for (std::size_t j = 0; j < p; ++j) protos(k, j) = base[j] + spec.within_super_shift * shift_dist(rng);
    }
  }
  return protos;
}

/// Train and test splits drawn from disjoint seed streams. Labels cycle
/// through the classes so every class count is balanced within one.
/// Pixels are stored on the 1/255 grid so the file round trip is exact.
inline std::pair<Dataset, Dataset> generate_synthetic(const SyntheticSpec& spec) {
  Tensor protos = synthetic_prototypes(spec);
  return {detail::sample_split(spec, protos, spec.train_count, detail::kTrainStream, Split::train),
          detail::sample_split(spec, protos, spec.test_count, detail::kTestStream, Split::test)};
}

/// Distribution-shifted test set: every prototype moves by a fresh seeded
/// perturbation of half the within-superclass scale, then test_count
/// samples are drawn from a stream the other splits never touch.
inline Dataset generate_shift_probe(const SyntheticSpec& spec) {
  Tensor protos = synthetic_prototypes(spec);
  auto rng = detail::stream(spec.seed, detail::kProbeShiftStream);
  std::normal_distribution<double> shift_dist(0.0, kSubclassPerturbationStd);
  for (double& v : protos.data()) v += 0.5 * spec.within_super_shift * shift_dist(rng);
  return detail::sample_split(spec, protos, spec.test_count, detail::kProbeSampleStream, Split::probe);
}

/// Rows `indices` of a dataset as (images, labels).
inline std::pair<Tensor, std::vector<std::size_t>> take_batch(const Dataset& d, std::span<const std::size_t> indices) {
  std::vector<std::size_t> labels(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) labels[i] = d.labels[indices[i]];
  return {gather_rows(d.images, indices), std::move(labels)};
}

// ---------------------------------------------------------------------------
// Dataset file: "TIMD", u32 version, u32 num_classes, u32 num_superclasses,
// u32 image_side, u32 N, u16 superclass map, u16 labels, u8 pixels.

inline constexpr std::uint32_t kDatasetVersion = 1;

inline io::Bytes serialize_dataset(const Dataset& d) {
  io::Writer w;
  w.magic("TIMD");
  w.put<std::uint32_t>(kDatasetVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d.num_classes()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d.num_superclasses));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d.image_side));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d.size()));
  for (std::size_t s : d.superclass_of) w.put<std::uint16_t>(static_cast<std::uint16_t>(s));
  for (std::size_t y : d.labels) w.put<std::uint16_t>(static_cast<std::uint16_t>(y));
  for (double v : d.images.data()) w.put<std::uint8_t>(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  return w.take();
}

/// The file carries no split tag; the caller names it.
inline Dataset deserialize_dataset(std::span<const std::uint8_t> bytes, Split split = Split::train) {
  io::Reader r(bytes);
  r.expect_magic("TIMD");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kDatasetVersion) throw Error(ErrorCode::UnsupportedVersion, "dataset version " + std::to_string(version));
  Dataset d;
  const std::size_t classes = r.get<std::uint32_t>("num_classes");
  d.num_superclasses = r.get<std::uint32_t>("num_superclasses");
  d.image_side = r.get<std::uint32_t>("image_side");
  const std::size_t n = r.get<std::uint32_t>("sample count");
  d.split = split;
  if (classes == 0 || d.image_side == 0 || n == 0) throw Error(ErrorCode::InvalidSpec, "empty dimension in dataset header");
  d.superclass_of.resize(classes);
  for (auto& s : d.superclass_of) {
    s = r.get<std::uint16_t>("superclass map");
    if (s >= d.num_superclasses) throw Error(ErrorCode::InvalidSpec, "superclass id out of range");
  }
  d.labels.resize(n);
  for (auto& y : d.labels) {
    y = r.get<std::uint16_t>("labels");
    if (y >= classes) throw Error(ErrorCode::LabelOutOfRange, "label out of range in dataset file");
  }
  const std::size_t p = d.pixels();
  if (r.remaining() < n * p) throw Error(ErrorCode::TruncatedFile, "file ends while reading pixels");
  d.images = Tensor::zeros(n, p);
  for (double& v : d.images.data()) v = r.get<std::uint8_t>("pixels") / 255.0;
  if (!r.at_end()) throw Error(ErrorCode::InvalidSpec, "trailing bytes after dataset");
  return d;
}

inline void save_dataset(const Dataset& d, const std::filesystem::path& path) { io::write_file(path, serialize_dataset(d)); }

inline Dataset load_dataset(const std::filesystem::path& path, Split split = Split::train) {
  return deserialize_dataset(io::read_file(path), split);
}

}  // namespace tima
