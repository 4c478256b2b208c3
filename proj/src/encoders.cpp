#include "mmn/encoders.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "mmn/error.hpp"

namespace mmn::encoders {

using diffcore::Shape;

const char* to_string(Aggregation a) {
  return a == Aggregation::kAvg ? "avg" : "cls";
}

Aggregation aggregation_from_string(const std::string& s) {
  if (s == "avg") return Aggregation::kAvg;
  if (s == "cls") return Aggregation::kCls;
  throw InvalidArgument("aggregation must be 'avg' or 'cls', got '" + s + "'");
}

const char* to_string(Branch b) { return b == Branch::kMatching ? "mm" : "iou"; }

void EncoderConfig::validate() const {
  if (kernel_size % 2 == 0) throw InvalidArgument("encoder: kernel_size must be odd");
  if (conv_layers < 1) throw InvalidArgument("encoder: conv_layers must be >= 1");
  if (joint_dim < 1 || token_dim < 1 || visual_dim < 1 || input_dim < 1) {
    throw InvalidArgument("encoder: dimensions must be >= 1");
  }
  if (vocab_size < 1) throw InvalidArgument("encoder: vocab_size must be >= 1");
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"vocab_size", c.vocab_size},   {"token_dim", c.token_dim},
       {"input_dim", c.input_dim},     {"visual_dim", c.visual_dim},
       {"joint_dim", c.joint_dim},     {"conv_layers", c.conv_layers},
       {"kernel_size", c.kernel_size}, {"aggregation", to_string(c.aggregation)}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c.vocab_size = j.at("vocab_size");
  c.token_dim = j.at("token_dim");
  c.input_dim = j.at("input_dim");
  c.visual_dim = j.at("visual_dim");
  c.joint_dim = j.at("joint_dim");
  c.conv_layers = j.at("conv_layers");
  c.kernel_size = j.at("kernel_size");
  c.aggregation = aggregation_from_string(j.at("aggregation"));
}

bool ScoreMap::valid(std::size_t i, std::size_t j) const {
  return !std::isnan(values[i * n + j]);
}

namespace {

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = dist(rng);
  return t;
}

Tensor normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace

MatchingModel::MatchingModel(const EncoderConfig& config, std::uint64_t seed)
    : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const auto& c = config_;
  auto linear = [&](const std::string& name, std::size_t in, std::size_t out) {
    const double b = 1.0 / std::sqrt(static_cast<double>(in));
    params_.add(name + ".weight", uniform({in, out}, b, rng));
    params_.add(name + ".bias", uniform({out}, b, rng));
  };

  params_.add("lang.embedding", normal({c.vocab_size, c.token_dim}, 1.0, rng));
  params_.add("lang.cls_mix.weight",
              uniform({c.token_dim, c.token_dim},
                      1.0 / std::sqrt(static_cast<double>(c.token_dim)), rng));
  params_.add("lang.norm.gamma", Tensor({c.token_dim}, 1.0));
  params_.add("lang.norm.beta", Tensor({c.token_dim}, 0.0));
  linear("lang.proj_mm", c.token_dim, c.joint_dim);
  linear("lang.proj_iou", c.token_dim, c.joint_dim);

  linear("video.reduce", c.input_dim, c.visual_dim);
  const std::size_t fan_in = c.kernel_size * c.kernel_size * c.visual_dim;
  const double cb = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (std::size_t l = 0; l < c.conv_layers; ++l) {
    const std::string name = "video.conv" + std::to_string(l);
    params_.add(name + ".weight",
                uniform({c.kernel_size, c.kernel_size, c.visual_dim, c.visual_dim},
                        cb, rng));
    params_.add(name + ".bias", uniform({c.visual_dim}, cb, rng));
  }
  linear("video.head_mm", c.visual_dim, c.joint_dim);
  linear("video.head_iou", c.visual_dim, c.joint_dim);
}

Var MatchingModel::encode_sentence(Graph& g, const QueryTokens& tokens,
                                   Aggregation mode) const {
  const auto& ids = tokens.ids;
  if (ids.empty()) throw InvalidArgument("encode_sentence: empty token list");
  if (ids[0] != kClassToken) {
    throw InvalidArgument("encode_sentence: first token must be the class token");
  }
  for (std::size_t id : ids) {
    if (id >= config_.vocab_size) {
      throw InvalidArgument("encode_sentence: token id " + std::to_string(id) +
                            " outside vocabulary of " +
                            std::to_string(config_.vocab_size));
    }
  }
  const std::size_t words = ids.size() - 1;
  if (mode == Aggregation::kAvg && words == 0) {
    throw InvalidArgument("encode_sentence: avg aggregation needs a non-class token");
  }
  Var table = g.param(params_.get("lang.embedding"));

  Var pooled;
  if (words > 0) {
    std::vector<std::size_t> rest(ids.begin() + 1, ids.end());
    Var rows = gather_rows(table, rest);
    Var avg = g.constant(Tensor({1, words}, 1.0 / static_cast<double>(words)));
    pooled = matmul(avg, rows);  // [1, d_tok]
  }
  Var feature;
  if (mode == Aggregation::kAvg) {
    feature = pooled;
  } else {
    const std::size_t cls[] = {kClassToken};
    feature = gather_rows(table, cls);
    if (words > 0) {
      feature = add(feature, matmul(pooled, g.param(params_.get("lang.cls_mix.weight"))));
    }
  }
  return layer_norm(feature, g.param(params_.get("lang.norm.gamma")),
                    g.param(params_.get("lang.norm.beta")));
}

SentenceVars MatchingModel::project_sentence(Graph& g, Var sentence) const {
  auto head = [&](const std::string& name) {
    Var y = matmul(sentence, g.param(params_.get(name + ".weight")));
    y = add(y, g.param(params_.get(name + ".bias")));
    return diffcore::l2_normalize(y);
  };
  return SentenceVars{head("lang.proj_mm"), head("lang.proj_iou")};
}

Var MatchingModel::reduce_clips(Graph& g, const Tensor& clips) const {
  if (clips.rank() != 2 || clips.dim(1) != config_.input_dim) {
    throw ShapeError("reduce_clips: expected [N, " +
                     std::to_string(config_.input_dim) + "], got " +
                     clips.shape_string());
  }
  Var x = matmul(g.constant(clips), g.param(params_.get("video.reduce.weight")));
  x = add(x, g.param(params_.get("video.reduce.bias")));
  return relu(x);
}

Var MatchingModel::build_map(Graph&, Var clips, const ValidMask& mask) const {
  return maxpool_interval(clips, mask.bytes());
}

Var MatchingModel::encode_video(Graph& g, Var grid, const ValidMask& mask) const {
  Var x = grid;
  for (std::size_t l = 0; l < config_.conv_layers; ++l) {
    const std::string name = "video.conv" + std::to_string(l);
    x = conv2d_same(x, g.param(params_.get(name + ".weight")),
                    g.param(params_.get(name + ".bias")), mask.bytes());
    x = relu(x);
    x = masked_fill(x, mask.invalid_bytes(), 0.0);
  }
  return x;
}

MomentVars MatchingModel::project_moments(Graph& g, Var features,
                                          const ValidMask& mask) const {
  const std::size_t n = mask.size();
  const std::size_t d = features.value().dim(2);
  Var cells = gather_rows(reshape(features, {n * n, d}), mask.flat_indices());
  auto head = [&](const std::string& name) {
    Var y = matmul(cells, g.param(params_.get(name + ".weight")));
    y = add(y, g.param(params_.get(name + ".bias")));
    return diffcore::l2_normalize(y);
  };
  return MomentVars{head("video.head_mm"), head("video.head_iou")};
}

SentenceVars MatchingModel::sentence_forward(Graph& g,
                                             const QueryTokens& tokens) const {
  return project_sentence(g, encode_sentence(g, tokens, config_.aggregation));
}

MomentVars MatchingModel::video_forward(Graph& g, const Tensor& clips,
                                        const ValidMask& mask) const {
  if (clips.dim(0) != mask.size()) {
    throw ShapeError("video_forward: " + std::to_string(clips.dim(0)) +
                     " clips for grid of size " + std::to_string(mask.size()));
  }
  Var reduced = reduce_clips(g, clips);
  Var grid = build_map(g, reduced, mask);
  return project_moments(g, encode_video(g, grid, mask), mask);
}

SentenceEmbedding MatchingModel::embed_sentence(const QueryTokens& tokens) const {
  Graph g(false);
  SentenceVars v = sentence_forward(g, tokens);
  const std::size_t d = config_.joint_dim;
  return SentenceEmbedding{{Branch::kMatching, v.mm.value().reshaped({d})},
                           {Branch::kIou, v.iou.value().reshaped({d})}};
}

MomentEmbeddings MatchingModel::embed_video(const Tensor& clips,
                                            const ValidMask& mask) const {
  Graph g(false);
  MomentVars v = video_forward(g, clips, mask);
  return MomentEmbeddings{{Branch::kMatching, mask, v.mm.value()},
                          {Branch::kIou, mask, v.iou.value()}};
}

ScoreMap score_map(const MomentBranch& moments, const SentenceBranch& sentence) {
  if (moments.branch != sentence.branch) {
    throw InvalidArgument(std::string("score_map: moment branch '") +
                          to_string(moments.branch) + "' with sentence branch '" +
                          to_string(sentence.branch) + "'");
  }
  const std::size_t n = moments.mask.size();
  const std::size_t d = sentence.vector.size();
  if (moments.rows.rank() != 2 || moments.rows.dim(1) != d ||
      moments.rows.dim(0) != moments.mask.count()) {
    throw ShapeError("score_map: moment rows " + moments.rows.shape_string() +
                     " vs sentence " + sentence.vector.shape_string());
  }
  ScoreMap map{n, std::vector<double>(n * n, std::numeric_limits<double>::quiet_NaN())};
  const auto& flat = moments.mask.flat_indices();
  for (std::size_t c = 0; c < flat.size(); ++c) {
    double dot = 0.0;
    for (std::size_t k = 0; k < d; ++k) dot += moments.rows.at(c, k) * sentence.vector[k];
    map.values[flat[c]] = dot;
  }
  return map;
}

}  // namespace mmn::encoders
