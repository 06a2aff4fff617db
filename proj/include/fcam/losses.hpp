#pragma once

#include <string>
#include <vector>

#include "fcam/data_model.hpp"
#include "fcam/sampling.hpp"
#include "json.hpp"

namespace fcam {

inline constexpr double kProbabilityFloor = 1e-12;

struct LossConfig {
  double alpha = 1.0;
  double lambda_crf = 2e-9;
  double barrier_t = 1.0;
  double t_init = 1.0;
  double t_factor = 1.01;
  double t_max = 10.0;
  int barrier_epochs = 0;  // number of update_barrier_t calls so far
  double crf_sigma_xy = 15.0;
  double crf_sigma_rgb = 0.1;
  // 0 = automatic (2 for images larger than 128x128, else 1).
  int crf_downsample = 0;
  bool use_sr = true;
  bool use_crf = true;
  bool use_asc = true;

  nlohmann::json to_json() const;
  static LossConfig from_json(const nlohmann::json& j);
};

enum class TrainingStage { classifier = 1, decoder = 2 };

struct LossBreakdown {
  double classification = 0.0;
  double partial_ce = 0.0;
  double crf = 0.0;
  double asc = 0.0;
  double total = 0.0;

  nlohmann::json to_json() const;
};

/// -log g(X)[y], with the probability floored at 1e-12.
double classification_ce(const std::vector<double>& probs, int y);
/// d/d logits of classification_ce for softmax probabilities: probs - onehot(y).
std::vector<float> classification_ce_logit_grad(const std::vector<double>& probs, int y);

/// Sum over labeled pixels of -log S_p[label]. Accumulates into grad when given.
double partial_cross_entropy(const SoftmaxMaps& s, const PseudoLabelMask& y, MapGradient* grad = nullptr);

struct CrfOptions {
  double sigma_xy = 15.0;
  double sigma_rgb = 0.1;
  int downsample = 1;
};

/// Dense bilateral CRF regularizer
///   R = sum_c sum_{p != q} w_pq S^c_p (1 - S^c_q),
///   w_pq = exp(-|pos_p - pos_q|^2 / 2 sigma_xy^2 - |rgb_p - rgb_q|^2 / 2 sigma_rgb^2).
/// With downsample f > 1 both S and X are block-averaged by f and the
/// spatial bandwidth is divided by f. Accumulates into grad when given.
double crf_loss(const SoftmaxMaps& s, const ImageTensor& x, const CrfOptions& opts, MapGradient* grad = nullptr);

/// Extended log-barrier: -(1/t) log(-u) for u <= -1/t^2, else
/// t u - (1/t) log(1/t^2) + 1/t.
double extended_log_barrier(double u, double t);
double extended_log_barrier_derivative(double u, double t);

/// Absolute size constraint on both channels:
///   sum_r barrier(-(sum_p S^r_p) / N, t).
double asc_log_barrier(const SoftmaxMaps& s, double t, MapGradient* grad = nullptr);

/// t <- min(t_init * t_factor^epochs, t_max) after counting one more epoch.
LossConfig update_barrier_t(LossConfig config);
double barrier_t_at_epoch(const LossConfig& config, int epoch);

int effective_crf_downsample(const LossConfig& config, int height, int width);

/// Evaluates every term. Stage 1 optimizes the classification term only;
/// stage 2 optimizes alpha*H + lambda*R + ASC (classification reported,
/// not optimized). Ablation flags drop terms from both value and gradient.
LossBreakdown total_loss(const std::vector<double>& probs, int y, const SoftmaxMaps& s, const PseudoLabelMask& mask,
                         const ImageTensor& x, const LossConfig& config, TrainingStage stage,
                         MapGradient* grad = nullptr);

TrainingStage stage_from_int(int stage);

}  // namespace fcam
