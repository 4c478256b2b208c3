#ifndef MMN_LOSSES_HPP_
#define MMN_LOSSES_HPP_

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmn/encoders.hpp"
#include "mmn/graph.hpp"
#include "mmn/negatives.hpp"

namespace mmn::losses {

using diffcore::Graph;
using diffcore::Tensor;
using diffcore::Var;
using encoders::ScoreMap;
using momentmap::ValidMask;

enum class FusionMode {
  kSigmoidProduct,  // sigmoid(a * s_iou) * sigmoid(a * s_mm)
  kLiteralProduct,  // s_iou * s_mm
};

const char* to_string(FusionMode mode);
FusionMode fusion_from_string(const std::string& s);

struct LossConfig {
  double margin = 0.3;
  double tau_s = 0.1;  // sentence -> moment direction
  double tau_v = 0.1;  // moment -> sentence direction
  double lambda = 0.001;
  double bce_weight = 1.0;  // 0 trains on the matching loss alone
  double amplification = 10.0;
  double t_min = 0.5;
  double t_max = 1.0;
  FusionMode fusion = FusionMode::kSigmoidProduct;

  void validate() const;
};

void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);

// Mean BCE of sigmoid(a * scores) against targets; scores and targets share
// a shape and hold one entry per valid cell.
Var bce_iou_loss(Var scores, const Tensor& targets, double amplification);
// Map form: cells outside the mask are ignored.
double bce_iou_loss(const ScoreMap& s_iou, std::span<const double> targets,
                    const ValidMask& mask, double amplification);

// exp((pos - m) / tau) over itself plus sum_j exp(neg_j / tau).
double pair_positive_prob(double pos, std::span<const double> negs,
                          double margin, double tau);

// Per-anchor outcome of the matching loss. Probabilities are NaN for a
// direction that had no negatives.
struct MatchingStats {
  std::vector<double> p_moment;    // p(i_v | s)
  std::vector<double> p_sentence;  // p(i_s | v)
  std::size_t empty_moment_dirs = 0;
  std::size_t empty_sentence_dirs = 0;
};

// Sum over anchors of -log p(i_v|s) - log p(i_s|v).
// video_mm: per batch video, [C, d] matching rows (mask.cells() order).
// sentence_mm: per anchor, [1, d].
Var mutual_matching_loss(Graph& g, const negatives::Batch& batch,
                         std::span<const Var> video_mm,
                         std::span<const Var> sentence_mm,
                         std::span<const negatives::NegativeSets> sets,
                         const LossConfig& cfg, MatchingStats* stats = nullptr);

Var total_loss(Var bce, Var mm, double lambda, double bce_weight = 1.0);
double total_loss(double bce, double mm, double lambda, double bce_weight = 1.0);

// Scaled-IoU targets [Q_v, C] of one batch video.
Tensor iou_targets(const negatives::Batch& batch, std::size_t video,
                   const LossConfig& cfg);

struct LossReport {
  double bce = 0.0;
  double mm = 0.0;
  double total = 0.0;
  MatchingStats matching;
};

struct BatchObjective {
  Var bce;
  Var mm;  // invalid when the matching loss was not evaluated
  Var total;
  LossReport report;
};

// Forward pass of the whole batch. The matching loss is evaluated whenever
// any negative family is enabled, and contributes lambda times its value.
BatchObjective batch_objective(Graph& g, const encoders::MatchingModel& model,
                               const negatives::Batch& batch,
                               std::span<const negatives::NegativeSets> sets,
                               const LossConfig& cfg, double lambda);

double fuse_score(double s_iou, double s_mm, double amplification, FusionMode mode);
ScoreMap fuse_scores(const ScoreMap& s_iou, const ScoreMap& s_mm,
                     double amplification, FusionMode mode = FusionMode::kSigmoidProduct);
// sigmoid(a * s) per valid cell.
ScoreMap sigmoid_map(const ScoreMap& s, double amplification);

}  // namespace mmn::losses

#endif  // MMN_LOSSES_HPP_
