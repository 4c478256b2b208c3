#ifndef MMN_ENCODERS_HPP_
#define MMN_ENCODERS_HPP_

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmn/graph.hpp"
#include "mmn/momentmap.hpp"

namespace mmn::encoders {

using diffcore::Graph;
using diffcore::ParameterStore;
using diffcore::Tensor;
using diffcore::Var;
using momentmap::ValidMask;

// Sentence aggregation over token features.
enum class Aggregation { kAvg, kCls };
// The two projection heads: mutual matching and IoU regression.
enum class Branch { kMatching, kIou };

const char* to_string(Aggregation a);
Aggregation aggregation_from_string(const std::string& s);
const char* to_string(Branch b);

inline constexpr std::size_t kClassToken = 0;

struct EncoderConfig {
  std::size_t vocab_size = 64;
  std::size_t token_dim = 64;   // language feature width
  std::size_t input_dim = 32;   // raw clip feature width
  std::size_t visual_dim = 32;  // moment-map channels
  std::size_t joint_dim = 64;   // joint embedding width
  std::size_t conv_layers = 2;
  std::size_t kernel_size = 3;
  Aggregation aggregation = Aggregation::kAvg;

  void validate() const;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

// Token ids; ids[0] is the class token.
struct QueryTokens {
  std::vector<std::size_t> ids;
};

struct SentenceBranch {
  Branch branch;
  Tensor vector;  // [d_joint], unit norm
};

struct SentenceEmbedding {
  SentenceBranch mm;
  SentenceBranch iou;
  const SentenceBranch& branch(Branch b) const {
    return b == Branch::kMatching ? mm : iou;
  }
};

// Unit vectors of the valid cells, in mask.cells() order.
struct MomentBranch {
  Branch branch;
  ValidMask mask;
  Tensor rows;  // [C, d_joint]
};

struct MomentEmbeddings {
  MomentBranch mm;
  MomentBranch iou;
  const MomentBranch& branch(Branch b) const {
    return b == Branch::kMatching ? mm : iou;
  }
};

// Graph handles for one sentence ([1, d_joint] each) or one video's valid
// cells ([C, d_joint] each).
struct SentenceVars {
  Var mm;
  Var iou;
};
struct MomentVars {
  Var mm;
  Var iou;
};

// N x N cosine scores; invalid cells hold NaN.
struct ScoreMap {
  std::size_t n = 0;
  std::vector<double> values;

  double at(std::size_t i, std::size_t j) const { return values[i * n + j]; }
  bool valid(std::size_t i, std::size_t j) const;
};

// Language encoder (token table, aggregation, LayerNorm, two linear heads)
// and video encoder (clip reduction, max-pool moment map, masked conv stack,
// two 1x1 heads). Parameter names:
//   lang.embedding        [vocab, d_tok]   (stepped at the language lr ratio)
//   lang.cls_mix.weight   [d_tok, d_tok]   class-token context mixing
//   lang.norm.{gamma,beta}
//   lang.proj_{mm,iou}.{weight,bias}
//   video.reduce.{weight,bias}
//   video.conv{l}.{weight,bias}
//   video.head_{mm,iou}.{weight,bias}
class MatchingModel {
 public:
  MatchingModel(const EncoderConfig& config, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  // [1, d_tok]. avg: LayerNorm of the mean non-class token embedding;
  // cls: LayerNorm of the class-token feature, which is the class embedding
  // plus a learned linear map of the mean non-class embedding.
  Var encode_sentence(Graph& g, const QueryTokens& tokens,
                      Aggregation mode) const;
  SentenceVars project_sentence(Graph& g, Var sentence) const;

  // [N, d_in] -> [N, d_v]
  Var reduce_clips(Graph& g, const Tensor& clips) const;
  // [N, d_v] -> [N, N, d_v] max-pooled moment map.
  Var build_map(Graph& g, Var clips, const ValidMask& mask) const;
  // L rounds of conv (K x K) -> relu -> zero invalid cells.
  Var encode_video(Graph& g, Var grid, const ValidMask& mask) const;
  MomentVars project_moments(Graph& g, Var features,
                             const ValidMask& mask) const;

  SentenceVars sentence_forward(Graph& g, const QueryTokens& tokens) const;
  MomentVars video_forward(Graph& g, const Tensor& clips,
                           const ValidMask& mask) const;

  // Frozen-parameter evaluation; safe to call concurrently.
  SentenceEmbedding embed_sentence(const QueryTokens& tokens) const;
  MomentEmbeddings embed_video(const Tensor& clips, const ValidMask& mask) const;

 private:
  EncoderConfig config_;
  ParameterStore params_;
};

// Cosine scores of one branch; rejects mismatched branches.
ScoreMap score_map(const MomentBranch& moments, const SentenceBranch& sentence);

}  // namespace mmn::encoders

#endif  // MMN_ENCODERS_HPP_
