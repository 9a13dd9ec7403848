#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "tima/autodiff.hpp"
#include "tima/data.hpp"
#include "tima/error.hpp"
#include "tima/losses.hpp"
#include "tima/model.hpp"
#include "tima/tensor.hpp"

namespace tima {

/// Which class-text matrix parameterizes the attack objective.
enum class TextSource { student, teacher };

/// l-infinity PGD settings. Run 0 always starts at the clean input; each
/// of the `restarts` further runs starts from uniform noise in the ball.
struct AttackConfig {
  double epsilon = 1.0 / 255.0;
  double step_size = 1.0 / 255.0;
  std::size_t steps = 2;
  std::size_t restarts = 0;
  std::uint64_t seed = 0;
  TextSource text_source = TextSource::student;

  void validate() const {
    if (!(epsilon >= 0.0)) throw Error(ErrorCode::InvalidConfig, "epsilon must be >= 0");
    if (steps > 0 && !(step_size > 0.0)) throw Error(ErrorCode::InvalidConfig, "step_size must be > 0");
  }

  /// The 2-step fine-tuning attack at eps = step = 1/255.
  static AttackConfig training() { return AttackConfig{}; }

  /// PGD-10 with step 1/255 at the given radius.
  static AttackConfig pgd10(double epsilon) {
    AttackConfig c;
    c.epsilon = epsilon;
    c.steps = 10;
    return c;
  }

  /// PGD-10 with five random restarts; the strongest attack shipped.
  static AttackConfig strong(double epsilon) {
    AttackConfig c = pgd10(epsilon);
    c.restarts = 5;
    return c;
  }

  friend bool operator==(const AttackConfig&, const AttackConfig&) = default;
};

/// Per-sample cross-entropy of softmax(s(z, t)/tau) at the true label.
inline std::vector<double> per_sample_ce(const DualEncoder& model, const Tensor& text, const Tensor& x,
                                         std::span<const std::size_t> labels, double tau) {
  Tensor z = encode_images(model, x);
  Tensor log_p = row_log_softmax(matmul_bt(z, text), tau);
  require_labels(labels, log_p.rows(), log_p.cols());
  std::vector<double> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = -log_p(i, labels[i]);
  return out;
}

/// d(sum_i CE_i)/dx. Rows are independent, so row i of the result is the
/// gradient of sample i's own loss.
inline Tensor input_gradient(const DualEncoder& model, const Tensor& text, const Tensor& x,
                             std::span<const std::size_t> labels, double tau) {
  Tape tape;
  BoundEncoder bound(tape, model);
  Var xv = tape.leaf(x);
  Var sims = matmul(bound.images(xv), tape.constant(transpose(text)));
  require_labels(labels, sims.value().rows(), sims.value().cols());
  Var loss = scale(sum(gather_cols(row_log_softmax(sims, tau), labels)), -1.0);
  return tape.backward(loss)[xv];
}

/// `steps` signed-gradient ascent steps from `start`, each followed by
/// projection onto the eps-ball around `origin` and onto [0, 1]. The
/// iteration depends only on the current point, so k steps then k' more
/// equals k + k' steps.
inline Tensor pgd_iterate(const DualEncoder& model, const Tensor& text, const Tensor& origin, Tensor start,
                          std::span<const std::size_t> labels, double epsilon, double step_size, std::size_t steps,
                          double tau) {
  require_same_shape(origin, start, "pgd_iterate");
  Tensor x = std::move(start);
  for (std::size_t s = 0; s < steps; ++s) {
    Tensor g = input_gradient(model, text, x, labels, tau);
    auto xs = x.data();
    auto gs = g.data();
    auto os = origin.data();
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double dir = gs[i] > 0.0 ? 1.0 : (gs[i] < 0.0 ? -1.0 : 0.0);
      const double stepped = xs[i] + step_size * dir;
      xs[i] = std::clamp(std::clamp(stepped, os[i] - epsilon, os[i] + epsilon), 0.0, 1.0);
    }
  }
  return x;
}

/// Maximizes the contrastive cross-entropy within the l-inf ball of
/// radius cfg.epsilon. Across restarts each sample keeps the candidate
/// with the highest final loss (earlier runs win ties).
inline Tensor pgd_attack(const DualEncoder& model, const Tensor& text, const Tensor& x,
                         std::span<const std::size_t> labels, const AttackConfig& cfg) {
  cfg.validate();
  require_unit_rows(text, "pgd_attack text matrix");
  require_labels(labels, x.rows(), text.rows());
  if (cfg.epsilon == 0.0 || (cfg.steps == 0 && cfg.restarts == 0)) return x;
  const double tau = model.temperature;

  Tensor best = pgd_iterate(model, text, x, x, labels, cfg.epsilon, cfg.step_size, cfg.steps, tau);
  if (cfg.restarts == 0) return best;
  std::vector<double> best_loss = per_sample_ce(model, text, best, labels, tau);

  for (std::size_t r = 1; r <= cfg.restarts; ++r) {
    auto rng = detail::stream(cfg.seed, 0xA77AC0000ULL + r);
    std::uniform_real_distribution<double> noise(-cfg.epsilon, cfg.epsilon);
    Tensor start = x;
    for (double& v : start.data()) v = std::clamp(v + noise(rng), 0.0, 1.0);
    Tensor cand = pgd_iterate(model, text, x, std::move(start), labels, cfg.epsilon, cfg.step_size, cfg.steps, tau);
    std::vector<double> loss = per_sample_ce(model, text, cand, labels, tau);
    for (std::size_t i = 0; i < loss.size(); ++i) {
      if (loss[i] > best_loss[i]) {
        best_loss[i] = loss[i];
        std::copy(cand.row(i).begin(), cand.row(i).end(), best.row(i).begin());
      }
    }
  }
  return best;
}

/// argmax_k s(z_i, t_k); the lowest index wins ties.
inline std::vector<std::size_t> classify(const Tensor& z, const Tensor& text) {
  Tensor s = matmul_bt(z, text);
  std::vector<std::size_t> out(s.rows());
  for (std::size_t i = 0; i < s.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < s.cols(); ++k)
      if (s(i, k) > s(i, best)) best = k;
    out[i] = best;
  }
  return out;
}

inline constexpr std::size_t kEvalChunk = 250;

/// Text matrix selected by `source`.
inline Tensor attack_text(const DualEncoder& model, const TeacherSnapshot& teacher, TextSource source) {
  return source == TextSource::teacher ? teacher.class_text() : encode_classes(model);
}

/// Predictions of `model` on attacked inputs, chunked in sample order.
inline std::vector<std::size_t> attacked_predictions(const DualEncoder& model, const Tensor& text, const Dataset& data,
                                                     const AttackConfig& cfg) {
  if (data.size() == 0) throw Error(ErrorCode::EmptyDataset, "no samples to evaluate");
  const Tensor classes = encode_classes(model);
  std::vector<std::size_t> preds;
  preds.reserve(data.size());
  for (std::size_t begin = 0; begin < data.size(); begin += kEvalChunk) {
    const std::size_t end = std::min(data.size(), begin + kEvalChunk);
    Tensor x = slice_rows(data.images, begin, end);
    std::span<const std::size_t> y(data.labels.data() + begin, end - begin);
    Tensor adv = pgd_attack(model, text, x, y, cfg);
    auto p = classify(encode_images(model, adv), classes);
    preds.insert(preds.end(), p.begin(), p.end());
  }
  return preds;
}

inline double accuracy(std::span<const std::size_t> preds, std::span<const std::size_t> labels) {
  if (labels.empty()) throw Error(ErrorCode::EmptyDataset, "no samples to evaluate");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += preds[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

/// Fraction of samples still classified correctly after the attack. The
/// attack objective uses the text matrix picked by cfg.text_source;
/// classification always uses the model's own class text.
inline double robust_accuracy(const DualEncoder& model, const TeacherSnapshot& teacher, const Dataset& data,
                              const AttackConfig& cfg) {
  auto preds = attacked_predictions(model, attack_text(model, teacher, cfg.text_source), data, cfg);
  return accuracy(preds, data.labels);
}

}  // namespace tima
