#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tima/autodiff.hpp"
#include "tima/error.hpp"
#include "tima/io.hpp"
#include "tima/tensor.hpp"

namespace tima {

struct EncoderConfig {
  std::size_t input_dim = 256;
  std::vector<std::size_t> hidden_dims{128};
  std::size_t embed_dim = 32;
  std::size_t num_classes = 8;
  std::uint64_t seed = 0;

  void validate() const {
    if (input_dim < 1) throw Error(ErrorCode::InvalidConfig, "input_dim must be >= 1");
    for (std::size_t h : hidden_dims)
      if (h < 1) throw Error(ErrorCode::InvalidConfig, "hidden dims must be >= 1");
    if (embed_dim < 2) throw Error(ErrorCode::InvalidConfig, "embed_dim must be >= 2");
    if (num_classes < 1) throw Error(ErrorCode::InvalidConfig, "num_classes must be >= 1");
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

inline constexpr double kDefaultTemperature = 0.01;

// Fixed input stem: pixels in [0, 1] are mapped to (x - 0.5) / 0.25 before
// the first layer.
inline constexpr double kInputCenter = 0.5;
inline constexpr double kInputSpread = 0.25;

/// The student model. The image side is a fixed input stem, then a tanh MLP ending in a linear map
/// to embed_dim; the text side is a per-class table pushed through one
/// linear projection. Both outputs are row-normalized.
struct DualEncoder {
  EncoderConfig config;
  std::vector<Tensor> weights;  // layer l: fan_in x fan_out
  std::vector<Tensor> biases;   // layer l: 1 x fan_out
  Tensor class_table;           // num_classes x embed_dim
  Tensor text_projection;       // embed_dim x embed_dim
  double temperature = kDefaultTemperature;

  std::vector<Tensor*> image_parameters() {
    std::vector<Tensor*> out;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      out.push_back(&weights[l]);
      out.push_back(&biases[l]);
    }
    return out;
  }
  std::vector<Tensor*> text_parameters() { return {&class_table, &text_projection}; }

  std::vector<const Tensor*> image_parameters() const {
    std::vector<const Tensor*> out;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      out.push_back(&weights[l]);
      out.push_back(&biases[l]);
    }
    return out;
  }
  std::vector<const Tensor*> text_parameters() const { return {&class_table, &text_projection}; }

  friend bool operator==(const DualEncoder&, const DualEncoder&) = default;
};

inline DualEncoder init_model(const EncoderConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  auto uniform = [&rng](Shape shape, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = dist(rng);
    return t;
  };

  DualEncoder m;
  m.config = cfg;
  std::size_t fan_in = cfg.input_dim;
  std::vector<std::size_t> outs = cfg.hidden_dims;
  outs.push_back(cfg.embed_dim);
  for (std::size_t fan_out : outs) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    m.weights.push_back(uniform({fan_in, fan_out}, bound));
    m.biases.push_back(uniform({1, fan_out}, bound));
    fan_in = fan_out;
  }
  m.class_table = uniform({cfg.num_classes, cfg.embed_dim}, 1.0);
  m.text_projection = uniform({cfg.embed_dim, cfg.embed_dim}, 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim)));
  return m;
}

/// A DualEncoder's parameters placed on a tape as leaves.
class BoundEncoder {
 public:
  BoundEncoder(Tape& tape, const DualEncoder& model) : tape_(&tape), input_dim_(model.config.input_dim) {
    for (std::size_t l = 0; l < model.weights.size(); ++l) {
      weights_.push_back(tape.leaf(model.weights[l]));
      biases_.push_back(tape.leaf(model.biases[l]));
    }
    table_ = tape.leaf(model.class_table);
    projection_ = tape.leaf(model.text_projection);
  }

  Tape& tape() const noexcept { return *tape_; }

  /// Z = normalize(MLP(X)); differentiable in the weights and in X.
  Var images(const Var& x) const {
    if (!x.value().is_matrix() || x.value().cols() != input_dim_) {
      throw Error(ErrorCode::ShapeMismatch, "images expect " + std::to_string(input_dim_) + " columns, got " +
                                                shape_string(x.value().shape()));
    }
    Var h = scale(add_scalar(x, -kInputCenter), 1.0 / kInputSpread);
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      h = add_row(matmul(h, weights_[l]), biases_[l]);
      if (l + 1 < weights_.size()) h = tanh(h);
    }
    return l2_normalize_rows(h);
  }

  Var images(const Tensor& x) const { return images(tape_->constant(x)); }

  /// T = normalize(table * projection).
  Var classes() const { return l2_normalize_rows(matmul(table_, projection_)); }

  /// Same order as DualEncoder::image_parameters().
  std::vector<Var> image_leaves() const {
    std::vector<Var> out;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      out.push_back(weights_[l]);
      out.push_back(biases_[l]);
    }
    return out;
  }
  std::vector<Var> text_leaves() const { return {table_, projection_}; }

 private:
  Tape* tape_;
  std::size_t input_dim_;
  std::vector<Var> weights_;
  std::vector<Var> biases_;
  Var table_;
  Var projection_;
};

inline Tensor encode_images(const DualEncoder& model, const Tensor& x) {
  Tape tape;
  BoundEncoder bound(tape, model);
  return bound.images(x).value();
}

inline Tensor encode_classes(const DualEncoder& model) {
  Tape tape;
  BoundEncoder bound(tape, model);
  return bound.classes().value();
}

// ---------------------------------------------------------------------------
// Checkpoint format: "TIMM", u32 version, config, then every tensor as
// (u32 rank, u32 dims..., f64 values), all little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_tensor(io::Writer& w, const Tensor& t) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
  for (double v : t.data()) w.put<double>(v);
}

inline Tensor get_tensor(io::Reader& r, const Shape& expected) {
  const auto rank = r.get<std::uint32_t>("tensor rank");
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.get<std::uint32_t>("tensor dims"));
  if (shape != expected) {
    throw Error(ErrorCode::ShapeMismatch, "checkpoint tensor " + shape_string(shape) + ", expected " + shape_string(expected));
  }
  std::vector<double> data(shape_size(shape));
  for (double& v : data) v = r.get<double>("tensor values");
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace detail

inline io::Bytes serialize_model(const DualEncoder& m) {
  io::Writer w;
  w.magic("TIMM");
  w.put<std::uint32_t>(kCheckpointVersion);
  const auto& c = m.config;
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.input_dim));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.hidden_dims.size()));
  for (std::size_t h : c.hidden_dims) w.put<std::uint32_t>(static_cast<std::uint32_t>(h));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.embed_dim));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.num_classes));
  w.put<std::uint64_t>(c.seed);
  w.put<double>(m.temperature);
  for (std::size_t l = 0; l < m.weights.size(); ++l) {
    detail::put_tensor(w, m.weights[l]);
    detail::put_tensor(w, m.biases[l]);
  }
  detail::put_tensor(w, m.class_table);
  detail::put_tensor(w, m.text_projection);
  return w.take();
}

inline DualEncoder deserialize_model(std::span<const std::uint8_t> bytes) {
  io::Reader r(bytes);
  r.expect_magic("TIMM");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::UnsupportedVersion, "checkpoint version " + std::to_string(version));
  }
  DualEncoder m;
  auto& c = m.config;
  c.input_dim = r.get<std::uint32_t>("input_dim");
  const auto depth = r.get<std::uint32_t>("hidden count");
  c.hidden_dims.clear();
  for (std::uint32_t i = 0; i < depth; ++i) c.hidden_dims.push_back(r.get<std::uint32_t>("hidden dims"));
  c.embed_dim = r.get<std::uint32_t>("embed_dim");
  c.num_classes = r.get<std::uint32_t>("num_classes");
  c.seed = r.get<std::uint64_t>("seed");
  c.validate();
  m.temperature = r.get<double>("temperature");
  if (!(m.temperature > 0.0)) throw Error(ErrorCode::InvalidTemperature, "checkpoint temperature");

  std::size_t fan_in = c.input_dim;
  std::vector<std::size_t> outs = c.hidden_dims;
  outs.push_back(c.embed_dim);
  for (std::size_t fan_out : outs) {
    m.weights.push_back(detail::get_tensor(r, {fan_in, fan_out}));
    m.biases.push_back(detail::get_tensor(r, {1, fan_out}));
    fan_in = fan_out;
  }
  m.class_table = detail::get_tensor(r, {c.num_classes, c.embed_dim});
  m.text_projection = detail::get_tensor(r, {c.embed_dim, c.embed_dim});
  if (!r.at_end()) throw Error(ErrorCode::InvalidConfig, "trailing bytes after checkpoint");
  return m;
}

inline void save_checkpoint(const DualEncoder& m, const std::filesystem::path& path) {
  io::write_file(path, serialize_model(m));
}

inline DualEncoder load_checkpoint(const std::filesystem::path& path) {
  return deserialize_model(io::read_file(path));
}

/// Frozen copy of a model plus its cached class-text matrix. Nothing can
/// write to it after construction.
class TeacherSnapshot {
 public:
  explicit TeacherSnapshot(const DualEncoder& model) : model_(model), class_text_(tima::encode_classes(model_)) {}

  const DualEncoder& model() const noexcept { return model_; }
  const Tensor& class_text() const noexcept { return class_text_; }
  double temperature() const noexcept { return model_.temperature; }

  Tensor encode_images(const Tensor& x) const { return tima::encode_images(model_, x); }

  /// FNV-1a over the serialized weights.
  std::uint64_t fingerprint() const { return io::fnv1a(serialize_model(model_)); }

  friend bool operator==(const TeacherSnapshot&, const TeacherSnapshot&) = default;

 private:
  DualEncoder model_;
  Tensor class_text_;
};

inline TeacherSnapshot snapshot_teacher(const DualEncoder& model) { return TeacherSnapshot(model); }

}  // namespace tima
