#ifndef MMN_EVAL_HPP_
#define MMN_EVAL_HPP_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmn/encoders.hpp"
#include "mmn/losses.hpp"
#include "mmn/momentmap.hpp"
#include "mmn/synthdata.hpp"

namespace mmn::eval {

using encoders::ScoreMap;
using momentmap::Interval;
using momentmap::TimeSpan;

struct Candidate {
  Interval interval;
  double score = 0.0;
};

// Greedy temporal NMS. Candidates are visited by descending score (NaN
// ranks last), ties by earlier start then shorter length; a candidate is
// dropped when its IoU with a kept one exceeds theta. limit > 0 stops after
// that many survivors.
std::vector<Candidate> nms(std::span<const Candidate> candidates, double theta,
                           std::size_t limit = 0);

struct RankedMoment {
  TimeSpan span;
  double score = 0.0;
};

// Post-NMS ranking of one query.
struct Prediction {
  std::vector<RankedMoment> ranked;
};

// Percentage of queries whose top-n contains a span with IoU >= m.
double rank_n_at_m(std::span<const Prediction> predictions, std::span<const TimeSpan> gts,
                   std::size_t n, double m);

struct LengthBin {
  double lower = 0.0;  // ratio range (lower, upper]
  double upper = 0.0;
  std::size_t count = 0;
  double recall = 0.0;  // R@1, IoU = 0.5; 0 for empty bins
};

// Buckets queries by GT length over video duration.
std::vector<LengthBin> length_decomposition(std::span<const Prediction> predictions,
                                            std::span<const TimeSpan> gts,
                                            std::span<const double> durations,
                                            double bin_width = 0.1);

std::string metric_name(std::size_t n, double m);

struct MetricsReport {
  std::map<std::string, double> metrics;
  std::vector<LengthBin> length_bins;
  std::size_t queries = 0;

  double at(std::size_t n, double m) const;
};

nlohmann::json metrics_json(const MetricsReport& report);

enum class ScoreSource { kFused, kIou, kMatching };
const char* to_string(ScoreSource s);
ScoreSource score_source_from_string(const std::string& s);

struct EvalConfig {
  std::vector<std::size_t> top_n{1, 5};
  std::vector<double> thresholds{0.3, 0.5, 0.7};
  double nms_threshold = 0.5;
  ScoreSource source = ScoreSource::kFused;
  momentmap::GridConfig grid;
  double amplification = 10.0;
  losses::FusionMode fusion = losses::FusionMode::kSigmoidProduct;

  void validate() const;
};

// The grid is carried by the enclosing configuration, not serialized here.
void to_json(nlohmann::json& j, const EvalConfig& c);
void from_json(const nlohmann::json& j, EvalConfig& c);

MetricsReport compute_metrics(std::span<const Prediction> predictions,
                              std::span<const TimeSpan> gts, std::span<const double> durations,
                              const EvalConfig& cfg);

// Violated metric sanity properties (empty when sound).
std::vector<std::string> check_metrics(const MetricsReport& report, const EvalConfig& cfg);

// Rewrites the sampled clip rows of one video before map building.
using ClipTransform = std::function<diffcore::Tensor(const diffcore::Tensor& clips,
                                                     std::size_t video_index)>;

// Row permutation seeded per (seed, video index).
ClipTransform shuffle_clips(std::uint64_t seed);
std::vector<std::size_t> clip_permutation(std::size_t n, std::uint64_t seed,
                                          std::size_t video_index);

struct EvalResult {
  MetricsReport report;
  std::vector<Prediction> predictions;
  std::vector<TimeSpan> gts;
  std::vector<double> durations;
};

// Scores maps of one query under the configured source; NaN off the mask.
ScoreMap query_scores(const encoders::MomentEmbeddings& video,
                      const encoders::SentenceEmbedding& sentence, const EvalConfig& cfg);
Prediction rank_map(const ScoreMap& scores, const momentmap::ValidMask& mask, double duration,
                    const EvalConfig& cfg);

EvalResult evaluate(const encoders::MatchingModel& model, const synthdata::Corpus& corpus,
                    const EvalConfig& cfg, const ClipTransform& transform = nullptr);

struct SanityResult {
  MetricsReport ordered;
  MetricsReport shuffled;
  std::map<std::string, double> gap;  // ordered - shuffled
};

SanityResult sanity_check(const encoders::MatchingModel& model, const synthdata::Corpus& corpus,
                          const EvalConfig& cfg, std::uint64_t seed);
SanityResult sanity_check(const encoders::MatchingModel& model, const synthdata::Corpus& corpus,
                          const EvalConfig& cfg, const ClipTransform& transform);

// Expected R@1 (IoU >= m) of a ranking that picks a valid cell uniformly.
double random_baseline(const synthdata::Corpus& corpus, const momentmap::GridConfig& grid,
                       double m);

struct ExportResult {
  std::filesystem::path iou_csv;
  std::filesystem::path mm_csv;
  std::filesystem::path fused_csv;
  std::filesystem::path embeddings;
  Interval top1;  // best fused cell before NMS
};

// Writes iou.csv, mm.csv and fused.csv (N x N, "NaN" off the mask) and
// embeddings.bin (f32 tensor file: cell mm rows and the sentence mm vector).
ExportResult export_maps(const encoders::MatchingModel& model, const synthdata::Video& video,
                         std::size_t query, const EvalConfig& cfg,
                         const std::filesystem::path& out_dir);

void write_csv_map(const ScoreMap& map, const std::filesystem::path& path);
ScoreMap read_csv_map(const std::filesystem::path& path);
// Highest-scoring valid cell (ties: earlier start, then shorter).
Interval top_cell(const ScoreMap& map);

// Predictions file: {"predictions": [{"video": id, "query": k,
// "ranked": [[start, end, score], ...]}]} with spans in seconds.
nlohmann::json predictions_json(const synthdata::Corpus& corpus, const EvalResult& result);
EvalResult evaluate_predictions(const synthdata::Corpus& corpus, const nlohmann::json& file,
                                const EvalConfig& cfg);

}  // namespace mmn::eval

#endif  // MMN_EVAL_HPP_
