#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "tima/autodiff.hpp"
#include "tima/error.hpp"
#include "tima/model.hpp"
#include "tima/tensor.hpp"

namespace tima {

/// Every scalar hyperparameter of the combined objective.
struct LossWeights {
  double tau = 0.01;     // softmax temperature
  double m = 0.1;        // adaptive margin scale
  double eta = 0.95;     // margin trigger threshold
  double alpha = 2.0;    // MHE distance exponent; only 2 is supported
  double lambda = 1.0;   // weight of the text-side terms
  double lambda_t = 1.0; // IAKD weight inside the text-side terms
  double lambda_v = 1.0; // TAKD weight

  void validate() const {
    if (!(tau > 0.0)) throw Error(ErrorCode::InvalidTemperature, "tau must be > 0");
    if (!(eta > 0.0 && eta < 1.0)) throw Error(ErrorCode::InvalidEta, "eta must lie in (0, 1)");
    if (!(m >= 0.0)) throw Error(ErrorCode::InvalidWeights, "margin m must be >= 0");
    if (!(lambda >= 0.0 && lambda_t >= 0.0 && lambda_v >= 0.0)) {
      throw Error(ErrorCode::InvalidWeights, "lambda weights must be >= 0");
    }
    if (alpha != 2.0) throw Error(ErrorCode::InvalidWeights, "alpha is fixed at 2");
  }

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

/// How triggered negative columns enter the logits. `literal` subtracts the
/// margin from every triggered column, ground truth included;
/// `negate_negatives` adds it to triggered negatives instead.
enum class MarginSign { literal, negate_negatives };

inline constexpr double kUnitTolerance = 1e-6;

inline void require_unit_rows(const Tensor& t, const char* what) {
  for (std::size_t i = 0; i < t.rows(); ++i) {
    const double n = row_norm(t.row(i));
    if (std::abs(n - 1.0) > kUnitTolerance) {
      throw Error(ErrorCode::NotNormalized, std::string(what) + " row " + std::to_string(i) + " has norm " + std::to_string(n));
    }
  }
}

inline void require_labels(std::span<const std::size_t> labels, std::size_t rows, std::size_t classes) {
  if (labels.size() != rows) throw Error(ErrorCode::ShapeMismatch, "label count does not match rows");
  for (std::size_t y : labels) {
    if (y >= classes) throw Error(ErrorCode::LabelOutOfRange, "label " + std::to_string(y) + " with " + std::to_string(classes) + " classes");
  }
}

/// S = A B^T for unit-row A (n x d) and B (k x d).
inline Var cosine_sim_matrix(const Var& a, const Var& b) {
  require_unit_rows(a.value(), "cosine_sim_matrix lhs");
  require_unit_rows(b.value(), "cosine_sim_matrix rhs");
  if (a.value().cols() != b.value().cols()) throw Error(ErrorCode::ShapeMismatch, "cosine_sim_matrix embedding widths");
  return matmul(a, transpose(b));
}

inline Tensor cosine_sim_matrix(const Tensor& a, const Tensor& b) {
  require_unit_rows(a, "cosine_sim_matrix lhs");
  require_unit_rows(b, "cosine_sim_matrix rhs");
  return matmul_bt(a, b);
}

/// Mean over ordered pairs j != k of 1 / (1 + |t_j - t_k|^2).
inline Var mhe_loss(const Var& t) {
  const std::size_t c = t.value().rows();
  if (c < 2) throw Error(ErrorCode::TooFewClasses, "MHE needs at least two classes");
  Tape& tape = *t.tape();
  Tensor off_diagonal(Shape{c, c}, 1.0);
  for (std::size_t j = 0; j < c; ++j) off_diagonal(j, j) = 0.0;
  Var energy = reciprocal(add_scalar(pairwise_sq_dist(t), 1.0));
  return scale(sum(mul(energy, tape.constant(std::move(off_diagonal)))), 1.0 / static_cast<double>(c * (c - 1)));
}

/// Mean over rows of KL(softmax(P/tau) || softmax(Q/tau)), in log space.
/// Detach P first when it is a teacher.
inline Var kl_rows(const Var& logits_p, const Var& logits_q, double tau) {
  require_same_shape(logits_p.value(), logits_q.value(), "kl_rows");
  Var log_p = row_log_softmax(logits_p, tau);
  Var log_q = row_log_softmax(logits_q, tau);
  Var terms = mul(exp(log_p), sub(log_p, log_q));
  return scale(sum(terms), 1.0 / static_cast<double>(logits_p.value().rows()));
}

/// -mean_i log softmax(S/tau)[i, y_i]; the plain contrastive objective.
inline Var contrastive_ce(const Var& sims, std::span<const std::size_t> labels, double tau) {
  require_labels(labels, sims.value().rows(), sims.value().cols());
  Var picked = gather_cols(row_log_softmax(sims, tau), labels);
  return scale(sum(picked), -1.0 / static_cast<double>(labels.size()));
}

/// Text-side distillation: teacher distribution from s(z^, t^), student
/// from s(z^, t). Teacher inputs are detached.
inline Var iakd_loss(const Var& teacher_z, const Var& teacher_t, const Var& student_t, double tau) {
  if (teacher_t.value().shape() != student_t.value().shape()) {
    throw Error(ErrorCode::ShapeMismatch, "iakd_loss text matrices differ in shape");
  }
  Var z_hat = detach(teacher_z);
  Var t_hat = detach(teacher_t);
  return kl_rows(cosine_sim_matrix(z_hat, t_hat), cosine_sim_matrix(z_hat, student_t), tau);
}

/// Text-distance adaptive margin. Entry (i, k) is m * s(t^_{y_i}, t^_k)
/// when s(z^_i, t^_k) >= eta * s(z^_i, t^_{y_i}), otherwise exactly 0.
inline Tensor adaptive_margin(const Tensor& sim_image_text, const Tensor& sim_text_text,
                              std::span<const std::size_t> labels, double m, double eta,
                              MarginSign sign = MarginSign::literal) {
  if (!(eta > 0.0 && eta < 1.0)) throw Error(ErrorCode::InvalidEta, "eta must lie in (0, 1)");
  if (!(m >= 0.0)) throw Error(ErrorCode::InvalidWeights, "margin m must be >= 0");
  const std::size_t n = sim_image_text.rows(), c = sim_image_text.cols();
  if (sim_text_text.rows() != c || sim_text_text.cols() != c) {
    throw Error(ErrorCode::ShapeMismatch, "text-text similarity must be C x C");
  }
  require_labels(labels, n, c);
  Tensor margin = Tensor::zeros(n, c);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = labels[i];
    const double threshold = eta * sim_image_text(i, y);
    for (std::size_t k = 0; k < c; ++k) {
      if (sim_image_text(i, k) < threshold) continue;
      const double value = m * sim_text_text(y, k);
      margin(i, k) = (sign == MarginSign::negate_negatives && k != y) ? -value : value;
    }
  }
  return margin;
}

/// Cross-entropy on softmax((S_adv - M) / tau). M is a constant.
inline Var tam_loss(const Var& sim_adv, const Tensor& margin, std::span<const std::size_t> labels, double tau) {
  require_same_shape(sim_adv.value(), margin, "tam_loss");
  require_labels(labels, sim_adv.value().rows(), sim_adv.value().cols());
  return contrastive_ce(sub(sim_adv, sim_adv.tape()->constant(margin)), labels, tau);
}

/// Image-side distillation: teacher distribution from s(z^, t^), student
/// from s(z_adv, t^). Teacher inputs are detached.
inline Var takd_loss(const Var& teacher_z, const Var& teacher_t, const Var& student_adv_z, double tau) {
  if (teacher_z.value().shape() != student_adv_z.value().shape()) {
    throw Error(ErrorCode::ShapeMismatch, "takd_loss image embeddings differ in shape");
  }
  Var z_hat = detach(teacher_z);
  Var t_hat = detach(teacher_t);
  return kl_rows(cosine_sim_matrix(z_hat, t_hat), cosine_sim_matrix(student_adv_z, t_hat), tau);
}

struct LossTerms {
  double tam = 0.0;
  double takd = 0.0;
  double mhe = 0.0;
  double iakd = 0.0;
  double total = 0.0;
};

struct TimaLoss {
  Var total;
  LossTerms terms;
};

/// TAM + lambda_v * TAKD + lambda * (MHE + lambda_t * IAKD).
///
/// Image parameters are reached only through TAM and TAKD (both read the
/// teacher's class text), text parameters only through MHE and IAKD (both
/// read the teacher's clean image embeddings).
inline TimaLoss tima_loss(const BoundEncoder& student, const TeacherSnapshot& teacher, const Tensor& x_clean,
                          const Tensor& x_adv, std::span<const std::size_t> labels, const LossWeights& w,
                          MarginSign sign = MarginSign::literal) {
  w.validate();
  require_same_shape(x_clean, x_adv, "tima_loss clean/adversarial batch");
  Tape& tape = student.tape();

  const Tensor& t_hat_value = teacher.class_text();
  Tensor z_hat_value = teacher.encode_images(x_clean);
  Var t_hat = tape.constant(t_hat_value);
  Var z_hat = tape.constant(z_hat_value);

  Var z_adv = student.images(x_adv);
  Var t_student = student.classes();

  Tensor margin = adaptive_margin(matmul_bt(z_hat_value, t_hat_value), matmul_bt(t_hat_value, t_hat_value), labels,
                                  w.m, w.eta, sign);
  Var tam = tam_loss(cosine_sim_matrix(z_adv, t_hat), margin, labels, w.tau);
  Var takd = takd_loss(z_hat, t_hat, z_adv, w.tau);
  Var mhe = mhe_loss(t_student);
  Var iakd = iakd_loss(z_hat, t_hat, t_student, w.tau);

  Var total = add(add(tam, scale(takd, w.lambda_v)), scale(add(mhe, scale(iakd, w.lambda_t)), w.lambda));
  return {total, LossTerms{tam.value().item(), takd.value().item(), mhe.value().item(), iakd.value().item(),
                           total.value().item()}};
}

}  // namespace tima
