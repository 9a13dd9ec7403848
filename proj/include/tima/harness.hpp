#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "tima/attacks.hpp"
#include "tima/autodiff.hpp"
#include "tima/data.hpp"
#include "tima/error.hpp"
#include "tima/io.hpp"
#include "tima/losses.hpp"
#include "tima/model.hpp"
#include "tima/tensor.hpp"

namespace tima {

enum class Variant { tima, tecoa, iat_only, tai_only, mhe_only };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::tima: return "tima";
    case Variant::tecoa: return "tecoa";
    case Variant::iat_only: return "iat_only";
    case Variant::tai_only: return "tai_only";
    case Variant::mhe_only: return "mhe_only";
  }
  return "?";
}

inline Variant parse_variant(std::string_view name) {
  for (Variant v : {Variant::tima, Variant::tecoa, Variant::iat_only, Variant::tai_only, Variant::mhe_only}) {
    if (name == variant_name(v)) return v;
  }
  throw Error(ErrorCode::InvalidVariant, "unknown variant '" + std::string(name) + "'");
}

struct TrainConfig {
  double learning_rate = 1e-3;
  double momentum = 0.9;
  std::size_t epochs = 10;
  std::size_t batch_size = 128;
  Variant variant = Variant::tima;
  bool freeze_text = false;
  LossWeights loss_weights;
  AttackConfig train_attack = AttackConfig::training();
  MarginSign margin_sign = MarginSign::literal;
  std::uint64_t seed = 0;

  /// Clean pretraining recipe: same optimizer, larger rate, more epochs.
  static TrainConfig pretrain() {
    TrainConfig c;
    c.learning_rate = 1e-2;
    c.epochs = 20;
    return c;
  }

  void validate() const {
    if (!(learning_rate > 0.0)) throw Error(ErrorCode::InvalidConfig, "learning_rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw Error(ErrorCode::InvalidConfig, "momentum must lie in [0, 1)");
    if (epochs < 1) throw Error(ErrorCode::InvalidConfig, "epochs must be >= 1");
    if (batch_size < 1) throw Error(ErrorCode::InvalidConfig, "batch_size must be >= 1");
    loss_weights.validate();
    train_attack.validate();
  }
};

/// Effective loss weights and switches for one fine-tuning variant.
struct VariantPlan {
  LossWeights weights;
  bool freeze_text = false;
  TextSource attack_text = TextSource::student;
};

inline VariantPlan resolve_variant(const TrainConfig& cfg) {
  VariantPlan p{cfg.loss_weights, cfg.freeze_text, cfg.train_attack.text_source};
  switch (cfg.variant) {
    case Variant::tima:
      break;
    case Variant::tecoa:
      p.weights.m = 0.0;
      p.weights.lambda = 0.0;
      p.weights.lambda_v = 0.0;
      p.freeze_text = true;
      p.attack_text = TextSource::teacher;
      break;
    case Variant::iat_only:
      p.weights.m = 0.0;
      p.weights.lambda_v = 0.0;
      break;
    case Variant::tai_only:
      p.weights.lambda = 0.0;
      p.freeze_text = true;
      break;
    case Variant::mhe_only:
      p.weights.m = 0.0;
      p.weights.lambda_t = 0.0;
      p.weights.lambda_v = 0.0;
      break;
    default:
      throw Error(ErrorCode::InvalidVariant, "unhandled variant");
  }
  return p;
}

/// SGD with heavy-ball momentum: v <- mu v + g; w <- w - lr v.
class SgdMomentum {
 public:
  SgdMomentum(double learning_rate, double momentum) : lr_(learning_rate), mu_(momentum) {}

  void step(std::span<Tensor* const> params, std::span<const Tensor* const> grads) {
    if (velocity_.empty()) {
      for (const Tensor* p : params) velocity_.push_back(Tensor::zeros_like(*p));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto v = velocity_[i].data();
      auto g = grads[i]->data();
      auto w = params[i]->data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = mu_ * v[j] + g[j];
        w[j] -= lr_ * v[j];
      }
    }
  }

 private:
  double lr_;
  double mu_;
  std::vector<Tensor> velocity_;
};

namespace detail {

inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, std::uint64_t seed,
                                                           std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto rng = stream(seed, 0xE9000000ULL + epoch);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < n; b += batch) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + batch)));
  }
  return out;
}

}  // namespace detail

struct TrainTrace {
  std::vector<double> epoch_loss;   // mean batch loss per epoch
  std::vector<LossTerms> batches;   // per-batch components, fine-tuning only
};

/// Clean contrastive training of both encoders; produces the model that
/// later becomes the frozen teacher.
inline TrainTrace pretrain_clean(DualEncoder& model, const Dataset& train, const TrainConfig& cfg) {
  cfg.validate();
  if (train.size() == 0) throw Error(ErrorCode::EmptyDataset, "empty training set");
  SgdMomentum opt(cfg.learning_rate, cfg.momentum);
  TrainTrace trace;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    auto batches = detail::epoch_batches(train.size(), cfg.batch_size, cfg.seed, epoch);
    for (const auto& idx : batches) {
      auto [x, y] = take_batch(train, idx);
      Tape tape;
      BoundEncoder bound(tape, model);
      Var loss = contrastive_ce(cosine_sim_matrix(bound.images(x), bound.classes()), y, model.temperature);
      Gradients grads = tape.backward(loss);
      std::vector<Tensor*> params = model.image_parameters();
      for (Tensor* t : model.text_parameters()) params.push_back(t);
      std::vector<const Tensor*> g;
      for (const Var& v : bound.image_leaves()) g.push_back(&grads[v]);
      for (const Var& v : bound.text_leaves()) g.push_back(&grads[v]);
      opt.step(params, g);
      total += loss.value().item();
    }
    trace.epoch_loss.push_back(total / static_cast<double>(batches.size()));
  }
  return trace;
}

/// What a fine-tuning step saw, reported before the parameter update.
struct BatchRecord {
  const DualEncoder& model;
  const Tensor& x_clean;
  const Tensor& x_adv;
  std::span<const std::size_t> labels;
  const LossTerms& terms;
};

using BatchObserver = std::function<void(const BatchRecord&)>;

/// Adversarial fine-tuning. Each batch is attacked with cfg.train_attack,
/// scored with the variant's view of the combined loss, then stepped.
inline TrainTrace finetune(DualEncoder& model, const TeacherSnapshot& teacher, const Dataset& train,
                           const TrainConfig& cfg, const BatchObserver& observer = nullptr) {
  cfg.validate();
  if (train.size() == 0) throw Error(ErrorCode::EmptyDataset, "empty training set");
  const VariantPlan plan = resolve_variant(cfg);
  plan.weights.validate();
  SgdMomentum opt(cfg.learning_rate, cfg.momentum);
  TrainTrace trace;
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    auto batches = detail::epoch_batches(train.size(), cfg.batch_size, cfg.seed, epoch);
    for (const auto& idx : batches) {
      auto [x, y] = take_batch(train, idx);
      AttackConfig attack = cfg.train_attack;
      attack.seed = cfg.train_attack.seed + step++;
      Tensor text = attack_text(model, teacher, plan.attack_text);
      Tensor x_adv = pgd_attack(model, text, x, y, attack);

      Tape tape;
      BoundEncoder bound(tape, model);
      TimaLoss loss = tima_loss(bound, teacher, x, x_adv, y, plan.weights, cfg.margin_sign);
      if (observer) observer(BatchRecord{model, x, x_adv, y, loss.terms});
      Gradients grads = tape.backward(loss.total);

      std::vector<Tensor*> params = model.image_parameters();
      std::vector<const Tensor*> g;
      for (const Var& v : bound.image_leaves()) g.push_back(&grads[v]);
      if (!plan.freeze_text) {
        for (Tensor* t : model.text_parameters()) params.push_back(t);
        for (const Var& v : bound.text_leaves()) g.push_back(&grads[v]);
      }
      opt.step(params, g);
      total += loss.terms.total;
      trace.batches.push_back(loss.terms);
    }
    trace.epoch_loss.push_back(total / static_cast<double>(batches.size()));
  }
  return trace;
}

inline double eval_clean(const DualEncoder& model, const Dataset& data) {
  if (data.size() == 0) throw Error(ErrorCode::EmptyDataset, "no samples to evaluate");
  return accuracy(classify(encode_images(model, data.images), encode_classes(model)), data.labels);
}

struct InterclassStats {
  double min = 0.0;
  double mean = 0.0;
};

/// Euclidean min and mean over unordered pairs of rows.
inline InterclassStats interclass_stats(const Tensor& t) {
  const std::size_t c = t.rows();
  if (c < 2) throw Error(ErrorCode::TooFewClasses, "need at least two class embeddings");
  InterclassStats s{std::numeric_limits<double>::infinity(), 0.0};
  std::size_t pairs = 0;
  for (std::size_t j = 0; j < c; ++j)
    for (std::size_t k = j + 1; k < c; ++k) {
      double d2 = 0.0;
      for (std::size_t p = 0; p < t.cols(); ++p) {
        const double diff = t(j, p) - t(k, p);
        d2 += diff * diff;
      }
      const double d = std::sqrt(d2);
      s.min = std::min(s.min, d);
      s.mean += d;
      ++pairs;
    }
  s.mean /= static_cast<double>(pairs);
  return s;
}

/// Mean text-text similarity within superclasses (off-diagonal) minus the
/// mean across superclasses. Positive means the block structure survives.
inline double superclass_block_gap(const Tensor& text, std::span<const std::size_t> superclass_of) {
  Tensor s = matmul_bt(text, text);
  double within = 0.0, across = 0.0;
  std::size_t nw = 0, na = 0;
  for (std::size_t j = 0; j < s.rows(); ++j)
    for (std::size_t k = 0; k < s.cols(); ++k) {
      if (j == k) continue;
      if (superclass_of[j] == superclass_of[k]) {
        within += s(j, k);
        ++nw;
      } else {
        across += s(j, k);
        ++na;
      }
    }
  if (nw == 0 || na == 0) throw Error(ErrorCode::InvalidSpec, "need two superclasses with two classes each");
  return within / static_cast<double>(nw) - across / static_cast<double>(na);
}

struct SuperclassSummary {
  std::size_t superclass = 0;
  double accuracy = 0.0;
  // Among misclassified samples of this superclass, the share predicted
  // as a sibling class of the same superclass.
  double within_superclass_error_share = 0.0;
};

inline std::vector<SuperclassSummary> superclass_confusion(const DualEncoder& model, const Dataset& data) {
  auto preds = classify(encode_images(model, data.images), encode_classes(model));
  std::vector<std::size_t> total(data.num_superclasses), hit(data.num_superclasses), wrong_inside(data.num_superclasses);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::size_t s = data.superclass_of[data.labels[i]];
    ++total[s];
    if (preds[i] == data.labels[i]) {
      ++hit[s];
    } else if (data.superclass_of[preds[i]] == s) {
      ++wrong_inside[s];
    }
  }
  std::vector<SuperclassSummary> out;
  for (std::size_t s = 0; s < data.num_superclasses; ++s) {
    SuperclassSummary r{s, 0.0, 0.0};
    if (total[s]) r.accuracy = static_cast<double>(hit[s]) / static_cast<double>(total[s]);
    const std::size_t wrong = total[s] - hit[s];
    if (wrong) r.within_superclass_error_share = static_cast<double>(wrong_inside[s]) / static_cast<double>(wrong);
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Similarity-matrix diagnostics.

/// Per-class mean of embedding rows, re-normalized to unit length.
inline Tensor class_mean_embeddings(const Tensor& z, std::span<const std::size_t> labels, std::size_t num_classes) {
  Tensor means = Tensor::zeros(num_classes, z.cols());
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t p = 0; p < z.cols(); ++p) means(labels[i], p) += z(i, p);
  for (std::size_t k = 0; k < num_classes; ++k) {
    const double n = row_norm(means.row(k));
    if (n > kMinRowNorm)
      for (double& v : means.row(k)) v /= n;
  }
  return means;
}

struct NamedMatrix {
  std::string name;
  Tensor values;
};

/// Integer numerator of eps over 255, used in names and report keys.
inline long eps_numerator(double eps) { return std::lround(eps * 255.0); }

inline std::string eps_label(double eps) { return std::to_string(eps_numerator(eps)) + "/255"; }

/// Text-text, clean image-text, and per-eps adversarial image-image
/// similarity matrices for one model. Adversarial examples come from
/// `attack` (its epsilon replaced per entry) against the model's own text.
inline std::vector<NamedMatrix> similarity_matrices(const std::string& prefix, const DualEncoder& model,
                                                    const Dataset& data, std::span<const double> eps_list,
                                                    AttackConfig attack) {
  const std::size_t c = data.num_classes();
  const Tensor text = encode_classes(model);
  std::vector<NamedMatrix> out;
  out.push_back({prefix + "_text_text", matmul_bt(text, text)});
  Tensor clean_means = class_mean_embeddings(encode_images(model, data.images), data.labels, c);
  out.push_back({prefix + "_image_text", matmul_bt(clean_means, text)});
  for (double eps : eps_list) {
    attack.epsilon = eps;
    Tensor z = Tensor::zeros(data.size(), model.config.embed_dim);
    for (std::size_t begin = 0; begin < data.size(); begin += kEvalChunk) {
      const std::size_t end = std::min(data.size(), begin + kEvalChunk);
      std::span<const std::size_t> y(data.labels.data() + begin, end - begin);
      Tensor adv = pgd_attack(model, text, slice_rows(data.images, begin, end), y, attack);
      Tensor za = encode_images(model, adv);
      std::copy(za.data().begin(), za.data().end(), z.data().begin() + static_cast<std::ptrdiff_t>(begin * z.cols()));
    }
    Tensor means = class_mean_embeddings(z, data.labels, c);
    out.push_back({prefix + "_adv_image_image_eps" + std::to_string(eps_numerator(eps)), matmul_bt(means, means)});
  }
  return out;
}

inline std::string matrix_csv(const Tensor& m) {
  std::string out;
  char buf[64];
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", m(i, j));
      if (j) out += ',';
      out += buf;
    }
    out += '\n';
  }
  return out;
}

/// Binary PGM (P5); [-1, 1] maps linearly onto [0, 255].
inline io::Bytes matrix_pgm(const Tensor& m) {
  const std::string header = "P5\n" + std::to_string(m.cols()) + " " + std::to_string(m.rows()) + "\n255\n";
  io::Bytes out(header.begin(), header.end());
  for (double v : m.data()) {
    const double level = std::clamp((v + 1.0) * 0.5 * 255.0, 0.0, 255.0);
    out.push_back(static_cast<std::uint8_t>(std::lround(level)));
  }
  return out;
}

struct MatrixFile {
  std::string name;
  std::string csv;  // file names relative to the export directory
  std::string pgm;

  friend bool operator==(const MatrixFile&, const MatrixFile&) = default;
};

inline std::vector<MatrixFile> write_matrices(std::span<const NamedMatrix> matrices, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + out_dir.string() + ": " + ec.message());
  std::vector<MatrixFile> manifest;
  for (const auto& m : matrices) {
    MatrixFile f{m.name, m.name + ".csv", m.name + ".pgm"};
    io::write_text(out_dir / f.csv, matrix_csv(m.values));
    io::write_file(out_dir / f.pgm, matrix_pgm(m.values));
    manifest.push_back(std::move(f));
  }
  return manifest;
}

/// Student and teacher matrices, written as CSV plus PGM heatmaps.
inline std::vector<MatrixFile> export_similarity_matrices(const DualEncoder& model, const TeacherSnapshot& teacher,
                                                          const Dataset& data, std::span<const double> eps_list,
                                                          const std::filesystem::path& out_dir,
                                                          const AttackConfig& attack = AttackConfig::pgd10(0.0)) {
  if (data.size() == 0) throw Error(ErrorCode::EmptyDataset, "no samples for similarity matrices");
  auto all = similarity_matrices("student", model, data, eps_list, attack);
  auto t = similarity_matrices("teacher", teacher.model(), data, eps_list, attack);
  all.insert(all.end(), std::make_move_iterator(t.begin()), std::make_move_iterator(t.end()));
  return write_matrices(all, out_dir);
}

// ---------------------------------------------------------------------------
// Evaluation report.

struct EvalReport {
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  double clean_accuracy = 0.0;
  std::vector<std::pair<std::string, double>> robust_accuracy;  // "k/255" -> accuracy
  double probe_clean_accuracy = 0.0;
  double text_min_distance = 0.0;
  double text_mean_distance = 0.0;
  double teacher_text_min_distance = 0.0;
  double teacher_text_mean_distance = 0.0;
  std::vector<SuperclassSummary> superclass_confusion;
  std::vector<MatrixFile> matrices;
};

/// Clean and attacked accuracy plus text geometry. `attack` fixes every
/// attack field except epsilon, which iterates over eps_list.
inline EvalReport evaluate(const DualEncoder& model, const TeacherSnapshot& teacher, const Dataset& test,
                           const Dataset* probe, std::span<const double> eps_list, AttackConfig attack) {
  EvalReport r;
  r.clean_accuracy = eval_clean(model, test);
  for (double eps : eps_list) {
    attack.epsilon = eps;
    r.robust_accuracy.emplace_back(eps_label(eps), robust_accuracy(model, teacher, test, attack));
  }
  if (probe) r.probe_clean_accuracy = eval_clean(model, *probe);
  const auto student = interclass_stats(encode_classes(model));
  const auto frozen = interclass_stats(teacher.class_text());
  r.text_min_distance = student.min;
  r.text_mean_distance = student.mean;
  r.teacher_text_min_distance = frozen.min;
  r.teacher_text_mean_distance = frozen.mean;
  r.superclass_confusion = superclass_confusion(model, test);
  return r;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  using nlohmann::json;
  json robust = json::object();
  for (const auto& [k, v] : r.robust_accuracy) robust[k] = v;
  json confusion = json::array();
  for (const auto& s : r.superclass_confusion) {
    confusion.push_back({{"superclass", s.superclass},
                         {"accuracy", s.accuracy},
                         {"within_superclass_error_share", s.within_superclass_error_share}});
  }
  json matrices = json::array();
  for (const auto& m : r.matrices) matrices.push_back({{"name", m.name}, {"csv", m.csv}, {"pgm", m.pgm}});
  return json{{"config", r.config},
              {"seed", r.seed},
              {"clean_accuracy", r.clean_accuracy},
              {"robust_accuracy", robust},
              {"probe_clean_accuracy", r.probe_clean_accuracy},
              {"text_min_distance", r.text_min_distance},
              {"text_mean_distance", r.text_mean_distance},
              {"teacher_text_min_distance", r.teacher_text_min_distance},
              {"teacher_text_mean_distance", r.teacher_text_mean_distance},
              {"superclass_confusion", confusion},
              {"matrices", matrices}};
}

namespace detail {

inline const nlohmann::json& require_key(const nlohmann::json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw Error(ErrorCode::Schema, std::string("missing key '") + key + "'");
  return j.at(key);
}

inline double require_number(const nlohmann::json& j, const char* key) {
  const auto& v = require_key(j, key);
  if (!v.is_number()) throw Error(ErrorCode::Schema, std::string("key '") + key + "' is not a number");
  return v.get<double>();
}

}  // namespace detail

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.config = detail::require_key(j, "config");
  const auto& seed = detail::require_key(j, "seed");
  if (!seed.is_number_unsigned()) throw Error(ErrorCode::Schema, "key 'seed' is not an unsigned integer");
  r.seed = seed.get<std::uint64_t>();
  r.clean_accuracy = detail::require_number(j, "clean_accuracy");
  const auto& robust = detail::require_key(j, "robust_accuracy");
  if (!robust.is_object()) throw Error(ErrorCode::Schema, "robust_accuracy must be an object");
  for (const auto& [k, v] : robust.items()) {
    if (!v.is_number()) throw Error(ErrorCode::Schema, "robust_accuracy values must be numbers");
    r.robust_accuracy.emplace_back(k, v.get<double>());
  }
  r.probe_clean_accuracy = detail::require_number(j, "probe_clean_accuracy");
  r.text_min_distance = detail::require_number(j, "text_min_distance");
  r.text_mean_distance = detail::require_number(j, "text_mean_distance");
  r.teacher_text_min_distance = detail::require_number(j, "teacher_text_min_distance");
  r.teacher_text_mean_distance = detail::require_number(j, "teacher_text_mean_distance");
  const auto& confusion = detail::require_key(j, "superclass_confusion");
  if (!confusion.is_array()) throw Error(ErrorCode::Schema, "superclass_confusion must be an array");
  for (const auto& s : confusion) {
    r.superclass_confusion.push_back({static_cast<std::size_t>(detail::require_number(s, "superclass")),
                                      detail::require_number(s, "accuracy"),
                                      detail::require_number(s, "within_superclass_error_share")});
  }
  const auto& matrices = detail::require_key(j, "matrices");
  if (!matrices.is_array()) throw Error(ErrorCode::Schema, "matrices must be an array");
  for (const auto& m : matrices) {
    r.matrices.push_back({detail::require_key(m, "name").get<std::string>(), detail::require_key(m, "csv").get<std::string>(),
                          detail::require_key(m, "pgm").get<std::string>()});
  }
  return r;
}

inline std::string report_text(const EvalReport& r) { return report_to_json(r).dump(2) + "\n"; }

inline void write_report(const EvalReport& r, const std::filesystem::path& path) { io::write_text(path, report_text(r)); }

inline EvalReport parse_report(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Schema, std::string("report is not valid JSON: ") + e.what());
  }
  return report_from_json(j);
}

inline EvalReport read_report(const std::filesystem::path& path) { return parse_report(io::read_text(path)); }

}  // namespace tima
