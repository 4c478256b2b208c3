#include "mmn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mmn/error.hpp"

namespace mmn::losses {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(sigmoid(x)) without overflow.
double log_sigmoid(double x) {
  return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

}  // namespace

const char* to_string(FusionMode mode) {
  return mode == FusionMode::kSigmoidProduct ? "sigmoid-product" : "literal-product";
}

FusionMode fusion_from_string(const std::string& s) {
  if (s == "sigmoid-product") return FusionMode::kSigmoidProduct;
  if (s == "literal-product") return FusionMode::kLiteralProduct;
  throw InvalidArgument("fusion must be 'sigmoid-product' or 'literal-product', got '" + s + "'");
}

void LossConfig::validate() const {
  if (!(tau_s > 0.0) || !(tau_v > 0.0)) throw InvalidArgument("loss: temperatures must be > 0");
  if (!(lambda >= 0.0)) throw InvalidArgument("loss: lambda must be >= 0");
  if (!(margin >= 0.0)) throw InvalidArgument("loss: margin must be >= 0");
  if (!(amplification > 0.0)) throw InvalidArgument("loss: amplification must be > 0");
  if (!(bce_weight >= 0.0)) throw InvalidArgument("loss: bce_weight must be >= 0");
  if (!(t_min < t_max)) throw InvalidArgument("loss: t_min must be below t_max");
}

void to_json(nlohmann::json& j, const LossConfig& c) {
  j = {{"margin", c.margin},         {"tau_s", c.tau_s},
       {"tau_v", c.tau_v},           {"lambda", c.lambda},
       {"bce_weight", c.bce_weight}, {"amplification", c.amplification},
       {"t_min", c.t_min},           {"t_max", c.t_max},
       {"fusion", to_string(c.fusion)}};
}

void from_json(const nlohmann::json& j, LossConfig& c) {
  c.margin = j.at("margin");
  c.tau_s = j.at("tau_s");
  c.tau_v = j.at("tau_v");
  c.lambda = j.at("lambda");
  c.bce_weight = j.at("bce_weight");
  c.amplification = j.at("amplification");
  c.t_min = j.at("t_min");
  c.t_max = j.at("t_max");
  c.fusion = fusion_from_string(j.at("fusion"));
}

Var bce_iou_loss(Var scores, const Tensor& targets, double amplification) {
  if (scores.value().size() == 0) throw InvalidArgument("bce_iou_loss: no valid cells");
  if (scores.shape() != targets.shape()) {
    throw ShapeError("bce_iou_loss: scores " + scores.value().shape_string() + " vs targets " +
                     targets.shape_string());
  }
  for (double y : targets.values()) {
    if (!(y >= 0.0 && y <= 1.0)) throw InvalidArgument("bce_iou_loss: target outside [0, 1]");
  }
  return diffcore::bce_with_logits(diffcore::scale(scores, amplification), targets);
}

double bce_iou_loss(const ScoreMap& s_iou, std::span<const double> targets,
                    const ValidMask& mask, double amplification) {
  const std::size_t n = mask.size();
  if (s_iou.n != n || targets.size() != n * n) {
    throw ShapeError("bce_iou_loss: map sizes differ from the mask");
  }
  if (mask.count() == 0) throw InvalidArgument("bce_iou_loss: no valid cells");
  std::vector<double> s, y;
  for (std::size_t f : mask.flat_indices()) {
    s.push_back(s_iou.values[f]);
    y.push_back(targets[f]);
  }
  Graph g(false);
  const std::size_t c = s.size();
  return bce_iou_loss(g.constant(Tensor({c}, s)), Tensor({c}, y), amplification).value().item();
}

double pair_positive_prob(double pos, std::span<const double> negs, double margin, double tau) {
  if (negs.empty()) throw InvalidArgument("pair_positive_prob: no negatives");
  if (!(tau > 0.0)) throw InvalidArgument("pair_positive_prob: tau must be > 0");
  const double z0 = (pos - margin) / tau;
  double top = z0;
  for (double n : negs) top = std::max(top, n / tau);
  double denom = 0.0;
  for (double n : negs) denom += std::exp(n / tau - top);
  const double num = std::exp(z0 - top);
  return num / (num + denom);
}

Var mutual_matching_loss(Graph& g, const negatives::Batch& batch,
                         std::span<const Var> video_mm, std::span<const Var> sentence_mm,
                         std::span<const negatives::NegativeSets> sets, const LossConfig& cfg,
                         MatchingStats* stats) {
  const std::size_t a_count = batch.anchors.size();
  const std::size_t c = batch.mask.count();
  if (video_mm.size() != batch.videos.size() || sentence_mm.size() != a_count ||
      sets.size() != a_count) {
    throw ShapeError("mutual_matching_loss: " + std::to_string(video_mm.size()) + " videos, " +
                     std::to_string(sentence_mm.size()) + " sentences, " +
                     std::to_string(sets.size()) + " negative sets for a batch of " +
                     std::to_string(batch.videos.size()) + " videos / " +
                     std::to_string(a_count) + " anchors");
  }
  Var moments = diffcore::concat_rows(video_mm);
  Var sentences = diffcore::concat_rows(sentence_mm);
  if (moments.value().dim(0) != batch.videos.size() * c) {
    throw ShapeError("mutual_matching_loss: moment rows do not match the mask");
  }
  Var sims = diffcore::matmul(moments, sentences, true);  // [B * C, A]
  auto flat = [&](std::size_t video, std::size_t cell, std::size_t anchor) {
    return (video * c + cell) * a_count + anchor;
  };

  MatchingStats local;
  local.p_moment.assign(a_count, kNaN);
  local.p_sentence.assign(a_count, kNaN);
  std::vector<Var> terms;
  auto direction = [&](std::vector<std::size_t> idx, double tau, double* p_out) {
    std::vector<double> shift(idx.size(), 0.0);
    shift[0] = -cfg.margin;
    Var z = diffcore::take(sims, idx);
    z = diffcore::scale(diffcore::add(z, g.constant(Tensor({idx.size()}, shift))), 1.0 / tau);
    const std::size_t first[] = {0};
    Var lse = diffcore::logsumexp(z);
    Var nll = diffcore::sub(lse, diffcore::sum(diffcore::take(z, first)));
    *p_out = std::exp(-nll.value().item());
    terms.push_back(nll);
  };

  for (std::size_t i = 0; i < a_count; ++i) {
    const auto& anchor = batch.anchors[i];
    const std::size_t pos = flat(anchor.video, anchor.cell_pos, i);
    const auto& s = sets[i];
    if (s.moments.empty()) {
      ++local.empty_moment_dirs;
    } else {
      std::vector<std::size_t> idx{pos};
      for (const auto& m : s.moments) idx.push_back(flat(m.video, m.cell_pos, i));
      direction(std::move(idx), cfg.tau_s, &local.p_moment[i]);
    }
    if (s.sentences.empty()) {
      ++local.empty_sentence_dirs;
    } else {
      std::vector<std::size_t> idx{pos};
      for (const auto& n : s.sentences) idx.push_back(flat(anchor.video, anchor.cell_pos, n.anchor));
      direction(std::move(idx), cfg.tau_v, &local.p_sentence[i]);
    }
  }
  if (terms.empty()) {
    throw InvalidArgument("mutual_matching_loss: every anchor has empty negatives in both directions");
  }
  if (stats) *stats = std::move(local);
  return diffcore::add_n(terms);
}

Var total_loss(Var bce, Var mm, double lambda, double bce_weight) {
  return diffcore::add(diffcore::scale(bce, bce_weight), diffcore::scale(mm, lambda));
}

double total_loss(double bce, double mm, double lambda, double bce_weight) {
  return bce_weight * bce + lambda * mm;
}

Tensor iou_targets(const negatives::Batch& batch, std::size_t video, const LossConfig& cfg) {
  const auto& cells = batch.mask.cells();
  const std::size_t n = batch.mask.size();
  const std::size_t first = batch.first_anchor[video];
  const std::size_t q = batch.anchors_of(video);
  const double duration = batch.videos[video].video->duration;
  Tensor y({q, cells.size()});
  for (std::size_t a = 0; a < q; ++a) {
    const auto& gt = batch.anchors[first + a].gt;
    for (std::size_t k = 0; k < cells.size(); ++k) {
      const double iou = momentmap::temporal_iou(momentmap::index_to_time(cells[k], n, duration), gt);
      y.at(a, k) = momentmap::scale_iou(iou, cfg.t_min, cfg.t_max);
    }
  }
  return y;
}

BatchObjective batch_objective(Graph& g, const encoders::MatchingModel& model,
                               const negatives::Batch& batch,
                               std::span<const negatives::NegativeSets> sets,
                               const LossConfig& cfg, double lambda) {
  const std::size_t a_count = batch.anchors.size();
  if (a_count == 0) throw InvalidArgument("batch_objective: batch has no queries");
  std::vector<encoders::MomentVars> videos;
  for (const auto& v : batch.videos) {
    videos.push_back(model.video_forward(g, v.clips.features, batch.mask));
  }
  std::vector<encoders::SentenceVars> sentences;
  for (const auto& a : batch.anchors) {
    const auto& query = batch.videos[a.video].video->queries[a.query];
    sentences.push_back(model.sentence_forward(g, encoders::QueryTokens{query.tokens}));
  }

  std::vector<Var> bce_terms;
  for (std::size_t b = 0; b < batch.videos.size(); ++b) {
    const std::size_t q = batch.anchors_of(b);
    if (q == 0) continue;
    std::vector<Var> rows;
    for (std::size_t k = 0; k < q; ++k) rows.push_back(sentences[batch.first_anchor[b] + k].iou);
    Var scores = diffcore::matmul(diffcore::concat_rows(rows), videos[b].iou, true);
    Var loss = bce_iou_loss(scores, iou_targets(batch, b, cfg), cfg.amplification);
    bce_terms.push_back(diffcore::scale(loss, static_cast<double>(q) / static_cast<double>(a_count)));
  }

  BatchObjective out;
  out.bce = diffcore::add_n(bce_terms);
  out.report.bce = out.bce.value().item();
  if (sets.empty()) {
    out.total = diffcore::scale(out.bce, cfg.bce_weight);
  } else {
    std::vector<Var> vm, sm;
    for (const auto& v : videos) vm.push_back(v.mm);
    for (const auto& s : sentences) sm.push_back(s.mm);
    out.mm = mutual_matching_loss(g, batch, vm, sm, sets, cfg, &out.report.matching);
    out.report.mm = out.mm.value().item();
    out.total = total_loss(out.bce, out.mm, lambda, cfg.bce_weight);
  }
  out.report.total = out.total.value().item();
  return out;
}

double fuse_score(double s_iou, double s_mm, double amplification, FusionMode mode) {
  if (mode == FusionMode::kLiteralProduct) return s_iou * s_mm;
  return std::exp(log_sigmoid(amplification * s_iou) + log_sigmoid(amplification * s_mm));
}

ScoreMap fuse_scores(const ScoreMap& s_iou, const ScoreMap& s_mm, double amplification,
                     FusionMode mode) {
  if (s_iou.n != s_mm.n || s_iou.values.size() != s_mm.values.size()) {
    throw ShapeError("fuse_scores: map sizes differ");
  }
  ScoreMap out{s_iou.n, std::vector<double>(s_iou.values.size(), kNaN)};
  for (std::size_t k = 0; k < out.values.size(); ++k) {
    const bool a = std::isnan(s_iou.values[k]);
    const bool b = std::isnan(s_mm.values[k]);
    if (a != b) throw InvalidArgument("fuse_scores: valid cells differ between branches");
    if (!a) out.values[k] = fuse_score(s_iou.values[k], s_mm.values[k], amplification, mode);
  }
  return out;
}

ScoreMap sigmoid_map(const ScoreMap& s, double amplification) {
  ScoreMap out{s.n, std::vector<double>(s.values.size(), kNaN)};
  for (std::size_t k = 0; k < s.values.size(); ++k) {
    if (!std::isnan(s.values[k])) out.values[k] = stable_sigmoid(amplification * s.values[k]);
  }
  return out;
}

}  // namespace mmn::losses
