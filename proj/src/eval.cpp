#include "mmn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "mmn/checkpoint.hpp"
#include "mmn/error.hpp"
#include "mmn/negatives.hpp"

namespace mmn::eval {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
// Slack for IoU threshold comparisons on spans computed in seconds.
constexpr double kIouSlop = 1e-9;

bool ranks_before(const Candidate& a, const Candidate& b) {
  const bool an = std::isnan(a.score), bn = std::isnan(b.score);
  if (an != bn) return bn;
  if (!an && a.score != b.score) return a.score > b.score;
  if (a.interval.start != b.interval.start) return a.interval.start < b.interval.start;
  return a.interval.end < b.interval.end;
}

bool hit(const RankedMoment& r, const TimeSpan& gt, double m) {
  return momentmap::temporal_iou(r.span, gt) >= m - kIouSlop;
}

std::size_t bin_of(double ratio, double width, std::size_t bins) {
  const double b = std::ceil(ratio / width - 1e-9) - 1.0;
  if (b < 0) return 0;
  return std::min(bins - 1, static_cast<std::size_t>(b));
}

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::vector<Candidate> nms(std::span<const Candidate> candidates, double theta, std::size_t limit) {
  if (!(theta > 0.0 && theta <= 1.0)) throw InvalidArgument("nms: threshold must lie in (0, 1]");
  std::vector<Candidate> order(candidates.begin(), candidates.end());
  std::sort(order.begin(), order.end(), ranks_before);
  std::vector<Candidate> kept;
  for (const auto& c : order) {
    bool keep = true;
    for (const auto& k : kept) {
      if (momentmap::temporal_iou(c.interval, k.interval) > theta) {
        keep = false;
        break;
      }
    }
    if (!keep) continue;
    kept.push_back(c);
    if (limit > 0 && kept.size() == limit) break;
  }
  return kept;
}

double rank_n_at_m(std::span<const Prediction> predictions, std::span<const TimeSpan> gts,
                   std::size_t n, double m) {
  if (predictions.empty()) throw InvalidArgument("rank_n_at_m: no queries");
  if (predictions.size() != gts.size()) {
    throw ShapeError("rank_n_at_m: " + std::to_string(predictions.size()) + " predictions for " +
                     std::to_string(gts.size()) + " ground truths");
  }
  std::size_t hits = 0;
  for (std::size_t q = 0; q < predictions.size(); ++q) {
    const auto& ranked = predictions[q].ranked;
    const std::size_t top = std::min(n, ranked.size());
    for (std::size_t k = 0; k < top; ++k) {
      if (hit(ranked[k], gts[q], m)) {
        ++hits;
        break;
      }
    }
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(predictions.size());
}

std::vector<LengthBin> length_decomposition(std::span<const Prediction> predictions,
                                            std::span<const TimeSpan> gts,
                                            std::span<const double> durations, double bin_width) {
  if (!(bin_width > 0.0 && bin_width <= 1.0)) {
    throw InvalidArgument("length_decomposition: bin width must lie in (0, 1]");
  }
  if (predictions.size() != gts.size() || gts.size() != durations.size()) {
    throw ShapeError("length_decomposition: inconsistent query counts");
  }
  const auto bins = static_cast<std::size_t>(std::ceil(1.0 / bin_width - 1e-9));
  std::vector<LengthBin> out(bins);
  std::vector<std::size_t> hits(bins, 0);
  for (std::size_t b = 0; b < bins; ++b) {
    out[b].lower = bin_width * static_cast<double>(b);
    out[b].upper = std::min(1.0, bin_width * static_cast<double>(b + 1));
  }
  for (std::size_t q = 0; q < gts.size(); ++q) {
    const std::size_t b = bin_of(gts[q].length() / durations[q], bin_width, bins);
    ++out[b].count;
    if (!predictions[q].ranked.empty() && hit(predictions[q].ranked[0], gts[q], 0.5)) ++hits[b];
  }
  for (std::size_t b = 0; b < bins; ++b) {
    if (out[b].count > 0) {
      out[b].recall = 100.0 * static_cast<double>(hits[b]) / static_cast<double>(out[b].count);
    }
  }
  return out;
}

std::string metric_name(std::size_t n, double m) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "R@%zu,IoU=%g", n, m);
  return buf;
}

double MetricsReport::at(std::size_t n, double m) const {
  auto it = metrics.find(metric_name(n, m));
  if (it == metrics.end()) throw InvalidArgument("metric " + metric_name(n, m) + " not computed");
  return it->second;
}

nlohmann::json metrics_json(const MetricsReport& report) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : report.metrics) j[k] = v;
  return j;
}

const char* to_string(ScoreSource s) {
  switch (s) {
    case ScoreSource::kFused:
      return "fused";
    case ScoreSource::kIou:
      return "iou";
    case ScoreSource::kMatching:
      return "mm";
  }
  return "fused";
}

ScoreSource score_source_from_string(const std::string& s) {
  if (s == "fused") return ScoreSource::kFused;
  if (s == "iou") return ScoreSource::kIou;
  if (s == "mm") return ScoreSource::kMatching;
  throw InvalidArgument("score source must be 'fused', 'iou' or 'mm', got '" + s + "'");
}

void EvalConfig::validate() const {
  if (top_n.empty() || thresholds.empty()) throw InvalidArgument("eval: empty metric grid");
  for (auto n : top_n) {
    if (n < 1) throw InvalidArgument("eval: top_n entries must be >= 1");
  }
  for (double m : thresholds) {
    if (!(m > 0.0 && m <= 1.0)) throw InvalidArgument("eval: IoU thresholds must lie in (0, 1]");
  }
  if (!(nms_threshold > 0.0 && nms_threshold <= 1.0)) {
    throw InvalidArgument("eval: nms_threshold must lie in (0, 1]");
  }
  if (grid.num_clips < 1 || grid.dense_threshold < 1 || grid.dense_threshold > grid.num_clips) {
    throw InvalidArgument("eval: grid needs 1 <= dense_threshold <= num_clips");
  }
}

void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = {{"top_n", c.top_n},
       {"thresholds", c.thresholds},
       {"nms_threshold", c.nms_threshold},
       {"source", to_string(c.source)},
       {"amplification", c.amplification},
       {"fusion", losses::to_string(c.fusion)}};
}

void from_json(const nlohmann::json& j, EvalConfig& c) {
  c.top_n = j.at("top_n").get<std::vector<std::size_t>>();
  c.thresholds = j.at("thresholds").get<std::vector<double>>();
  c.nms_threshold = j.at("nms_threshold");
  c.source = score_source_from_string(j.at("source"));
  c.amplification = j.at("amplification");
  c.fusion = losses::fusion_from_string(j.at("fusion"));
}

MetricsReport compute_metrics(std::span<const Prediction> predictions,
                              std::span<const TimeSpan> gts, std::span<const double> durations,
                              const EvalConfig& cfg) {
  MetricsReport r;
  r.queries = predictions.size();
  for (std::size_t n : cfg.top_n) {
    for (double m : cfg.thresholds) r.metrics[metric_name(n, m)] = rank_n_at_m(predictions, gts, n, m);
  }
  r.length_bins = length_decomposition(predictions, gts, durations);
  return r;
}

std::vector<std::string> check_metrics(const MetricsReport& report, const EvalConfig& cfg) {
  std::vector<std::string> issues;
  for (const auto& [k, v] : report.metrics) {
    if (!(v >= 0.0 && v <= 100.0)) issues.push_back(k + " = " + format_number(v) + " outside [0, 100]");
  }
  std::vector<std::size_t> ns = cfg.top_n;
  std::sort(ns.begin(), ns.end());
  std::vector<double> ms = cfg.thresholds;
  std::sort(ms.begin(), ms.end());
  for (double m : ms) {
    for (std::size_t k = 1; k < ns.size(); ++k) {
      if (report.at(ns[k], m) < report.at(ns[k - 1], m)) {
        issues.push_back(metric_name(ns[k], m) + " below " + metric_name(ns[k - 1], m));
      }
    }
  }
  for (std::size_t n : ns) {
    for (std::size_t k = 1; k < ms.size(); ++k) {
      if (report.at(n, ms[k]) > report.at(n, ms[k - 1])) {
        issues.push_back(metric_name(n, ms[k]) + " above " + metric_name(n, ms[k - 1]));
      }
    }
  }
  return issues;
}

std::vector<std::size_t> clip_permutation(std::size_t n, std::uint64_t seed, std::size_t video_index) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(negatives::mix_seed(seed, video_index));
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

ClipTransform shuffle_clips(std::uint64_t seed) {
  return [seed](const diffcore::Tensor& clips, std::size_t video_index) {
    const std::size_t n = clips.dim(0), d = clips.dim(1);
    const auto perm = clip_permutation(n, seed, video_index);
    diffcore::Tensor out(clips.shape());
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < d; ++c) out.at(r, c) = clips.at(perm[r], c);
    }
    return out;
  };
}

ScoreMap query_scores(const encoders::MomentEmbeddings& video,
                      const encoders::SentenceEmbedding& sentence, const EvalConfig& cfg) {
  using encoders::Branch;
  switch (cfg.source) {
    case ScoreSource::kIou:
      return losses::sigmoid_map(encoders::score_map(video.iou, sentence.iou), cfg.amplification);
    case ScoreSource::kMatching:
      return losses::sigmoid_map(encoders::score_map(video.mm, sentence.mm), cfg.amplification);
    case ScoreSource::kFused:
      break;
  }
  return losses::fuse_scores(encoders::score_map(video.iou, sentence.iou),
                             encoders::score_map(video.mm, sentence.mm), cfg.amplification,
                             cfg.fusion);
}

Prediction rank_map(const ScoreMap& scores, const momentmap::ValidMask& mask, double duration,
                    const EvalConfig& cfg) {
  std::vector<Candidate> cands;
  cands.reserve(mask.count());
  const auto& cells = mask.cells();
  const auto& flat = mask.flat_indices();
  for (std::size_t k = 0; k < cells.size(); ++k) cands.push_back({cells[k], scores.values[flat[k]]});
  const std::size_t limit = *std::max_element(cfg.top_n.begin(), cfg.top_n.end());
  Prediction p;
  for (const auto& c : nms(cands, cfg.nms_threshold, limit)) {
    p.ranked.push_back({momentmap::index_to_time(c.interval, mask.size(), duration), c.score});
  }
  return p;
}

EvalResult evaluate(const encoders::MatchingModel& model, const synthdata::Corpus& corpus,
                    const EvalConfig& cfg, const ClipTransform& transform) {
  cfg.validate();
  if (corpus.query_count() == 0) throw InvalidArgument("evaluate: corpus has no queries");
  const auto mask = momentmap::valid_mask(cfg.grid.num_clips, cfg.grid.dense_threshold);
  EvalResult out;
  for (std::size_t v = 0; v < corpus.videos.size(); ++v) {
    const auto& video = corpus.videos[v];
    auto clips = momentmap::sample_clips(video.features, cfg.grid.num_clips, video.duration);
    if (transform) clips.features = transform(clips.features, v);
    const auto moments = model.embed_video(clips.features, mask);
    for (const auto& q : video.queries) {
      const auto sentence = model.embed_sentence(encoders::QueryTokens{q.tokens});
      out.predictions.push_back(rank_map(query_scores(moments, sentence, cfg), mask, video.duration, cfg));
      out.gts.push_back(video.gt_time(q));
      out.durations.push_back(video.duration);
    }
  }
  out.report = compute_metrics(out.predictions, out.gts, out.durations, cfg);
  return out;
}

SanityResult sanity_check(const encoders::MatchingModel& model, const synthdata::Corpus& corpus,
                          const EvalConfig& cfg, const ClipTransform& transform) {
  SanityResult r;
  r.ordered = evaluate(model, corpus, cfg).report;
  r.shuffled = evaluate(model, corpus, cfg, transform).report;
  for (const auto& [k, v] : r.ordered.metrics) r.gap[k] = v - r.shuffled.metrics.at(k);
  return r;
}

SanityResult sanity_check(const encoders::MatchingModel& model, const synthdata::Corpus& corpus,
                          const EvalConfig& cfg, std::uint64_t seed) {
  return sanity_check(model, corpus, cfg, shuffle_clips(seed));
}

double random_baseline(const synthdata::Corpus& corpus, const momentmap::GridConfig& grid, double m) {
  const auto mask = momentmap::valid_mask(grid.num_clips, grid.dense_threshold);
  double total = 0.0;
  std::size_t queries = 0;
  for (const auto& v : corpus.videos) {
    for (const auto& q : v.queries) {
      const auto gt = v.gt_time(q);
      std::size_t good = 0;
      for (const auto& cell : mask.cells()) {
        RankedMoment r{momentmap::index_to_time(cell, mask.size(), v.duration), 0.0};
        if (hit(r, gt, m)) ++good;
      }
      total += static_cast<double>(good) / static_cast<double>(mask.count());
      ++queries;
    }
  }
  if (queries == 0) throw InvalidArgument("random_baseline: corpus has no queries");
  return 100.0 * total / static_cast<double>(queries);
}

void write_csv_map(const ScoreMap& map, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  for (std::size_t i = 0; i < map.n; ++i) {
    for (std::size_t j = 0; j < map.n; ++j) {
      if (j > 0) os << ',';
      const double v = map.at(i, j);
      if (std::isnan(v)) {
        os << "NaN";
      } else {
        os << format_number(v);
      }
    }
    os << '\n';
  }
  if (!os) throw Error("failed writing " + path.string());
}

ScoreMap read_csv_map(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) {
      row.push_back(field == "NaN" ? kNaN : std::stod(field));
    }
    rows.push_back(std::move(row));
  }
  ScoreMap map{rows.size(), {}};
  for (const auto& r : rows) {
    if (r.size() != map.n) throw DataError(path.string() + ": map is not square");
    map.values.insert(map.values.end(), r.begin(), r.end());
  }
  return map;
}

Interval top_cell(const ScoreMap& map) {
  std::optional<Candidate> best;
  for (std::size_t i = 0; i < map.n; ++i) {
    for (std::size_t j = i; j < map.n; ++j) {
      if (std::isnan(map.at(i, j))) continue;
      Candidate c{{i, j}, map.at(i, j)};
      if (!best || ranks_before(c, *best)) best = c;
    }
  }
  if (!best) throw InvalidArgument("top_cell: map has no valid cells");
  return best->interval;
}

ExportResult export_maps(const encoders::MatchingModel& model, const synthdata::Video& video,
                         std::size_t query, const EvalConfig& cfg,
                         const std::filesystem::path& out_dir) {
  if (query >= video.queries.size()) {
    throw InvalidArgument("export_maps: video " + video.id + " has no query " + std::to_string(query));
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error("cannot create " + out_dir.string() + ": " + ec.message());
  const auto mask = momentmap::valid_mask(cfg.grid.num_clips, cfg.grid.dense_threshold);
  const auto clips = momentmap::sample_clips(video.features, cfg.grid.num_clips, video.duration);
  const auto moments = model.embed_video(clips.features, mask);
  const auto sentence = model.embed_sentence(encoders::QueryTokens{video.queries[query].tokens});
  const auto s_iou = encoders::score_map(moments.iou, sentence.iou);
  const auto s_mm = encoders::score_map(moments.mm, sentence.mm);

  ExportResult r;
  r.iou_csv = out_dir / "iou.csv";
  r.mm_csv = out_dir / "mm.csv";
  r.fused_csv = out_dir / "fused.csv";
  r.embeddings = out_dir / "embeddings.bin";
  const auto fused = losses::fuse_scores(s_iou, s_mm, cfg.amplification, cfg.fusion);
  write_csv_map(losses::sigmoid_map(s_iou, cfg.amplification), r.iou_csv);
  write_csv_map(losses::sigmoid_map(s_mm, cfg.amplification), r.mm_csv);
  write_csv_map(fused, r.fused_csv);

  diffcore::TensorFile dump;
  dump.format = "mmn-embeddings";
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : mask.cells()) cells.push_back({c.start, c.end});
  dump.metadata = {{"video", video.id}, {"query", query}, {"cells", cells}};
  dump.tensors.push_back({"moments.mm", moments.mm.rows});
  dump.tensors.push_back({"sentence.mm", sentence.mm.vector});
  write_tensor_file(r.embeddings, dump, diffcore::Precision::kFloat32);
  r.top1 = top_cell(fused);
  return r;
}

nlohmann::json predictions_json(const synthdata::Corpus& corpus, const EvalResult& result) {
  nlohmann::json list = nlohmann::json::array();
  std::size_t k = 0;
  for (const auto& v : corpus.videos) {
    for (std::size_t q = 0; q < v.queries.size(); ++q, ++k) {
      nlohmann::json ranked = nlohmann::json::array();
      for (const auto& r : result.predictions.at(k).ranked) {
        ranked.push_back({r.span.start, r.span.end, r.score});
      }
      list.push_back({{"video", v.id}, {"query", q}, {"ranked", ranked}});
    }
  }
  return {{"predictions", list}};
}

EvalResult evaluate_predictions(const synthdata::Corpus& corpus, const nlohmann::json& file,
                                const EvalConfig& cfg) {
  cfg.validate();
  std::map<std::pair<std::string, std::size_t>, Prediction> by_key;
  if (!file.contains("predictions") || !file["predictions"].is_array()) {
    throw DataError("predictions file: missing 'predictions' array");
  }
  for (const auto& e : file["predictions"]) {
    Prediction p;
    for (const auto& r : e.at("ranked")) {
      p.ranked.push_back({{r.at(0).get<double>(), r.at(1).get<double>()},
                          r.size() > 2 ? r.at(2).get<double>() : 0.0});
    }
    by_key[{e.at("video").get<std::string>(), e.at("query").get<std::size_t>()}] = std::move(p);
  }
  EvalResult out;
  for (const auto& v : corpus.videos) {
    for (std::size_t q = 0; q < v.queries.size(); ++q) {
      auto it = by_key.find({v.id, q});
      if (it == by_key.end()) {
        throw DataError("predictions file: no entry for video " + v.id + " query " + std::to_string(q));
      }
      out.predictions.push_back(it->second);
      out.gts.push_back(v.gt_time(v.queries[q]));
      out.durations.push_back(v.duration);
    }
  }
  out.report = compute_metrics(out.predictions, out.gts, out.durations, cfg);
  return out;
}

}  // namespace mmn::eval
