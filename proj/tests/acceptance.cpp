// Acceptance gates. One PASS/FAIL line per criterion; exit status 1 when
// any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mmn/cli.hpp"
#include "mmn/config.hpp"
#include "mmn/eval.hpp"
#include "mmn/losses.hpp"
#include "mmn/momentmap.hpp"
#include "mmn/synthdata.hpp"
#include "mmn/trainer.hpp"
#include "test_util.hpp"

namespace mmn::acceptance {
namespace {

using eval::Candidate;
using eval::Prediction;
using eval::RankedMoment;
using eval::ScoreSource;
using momentmap::Interval;
using momentmap::TimeSpan;

constexpr std::uint64_t kCorpusSeed = 7;
constexpr std::size_t kSeeds = 3;
constexpr std::size_t kOracleInstances = 200;
const char* const kR1 = "R@1,IoU=0.5";

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 2) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// -- reference implementations -------------------------------------------

double ref_interval_iou(const Interval& a, const Interval& b) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t t = 0; t <= std::max(a.end, b.end); ++t) {
    const bool in_a = t >= a.start && t <= a.end;
    const bool in_b = t >= b.start && t <= b.end;
    inter += in_a && in_b;
    uni += in_a || in_b;
  }
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double ref_span_iou(const TimeSpan& a, const TimeSpan& b) {
  if (a.end <= b.start || b.end <= a.start) return 0.0;
  double p[4] = {a.start, a.end, b.start, b.end};
  std::sort(p, p + 4);
  return (p[2] - p[1]) / (p[3] - p[0]);
}

double ref_scale_iou(double iou, double lo, double hi) {
  if (iou <= lo) return 0.0;
  if (iou >= hi) return 1.0;
  return (iou - lo) / (hi - lo);
}

bool ref_mask(std::size_t i, std::size_t j, std::size_t g) {
  if (j < i) return false;
  const std::size_t d = j - i + 1;
  if (d <= g) return true;
  std::size_t s = 1;
  while (s * g < d) s *= 2;
  return d % s == 0 && i % s == 0;
}

std::vector<Candidate> ref_nms(const std::vector<Candidate>& c, double theta) {
  std::vector<Candidate> kept;
  std::vector<bool> gone(c.size(), false);
  for (;;) {
    std::size_t best = c.size();
    for (std::size_t k = 0; k < c.size(); ++k) {
      if (gone[k]) continue;
      if (best == c.size()) {
        best = k;
        continue;
      }
      const auto& a = c[k];
      const auto& b = c[best];
      if (a.score > b.score ||
          (a.score == b.score && (a.interval.start < b.interval.start ||
                                  (a.interval.start == b.interval.start &&
                                   a.interval.end < b.interval.end)))) {
        best = k;
      }
    }
    if (best == c.size()) break;
    kept.push_back(c[best]);
    for (std::size_t k = 0; k < c.size(); ++k) {
      if (!gone[k] && ref_interval_iou(c[k].interval, c[best].interval) > theta) gone[k] = true;
    }
    gone[best] = true;
  }
  return kept;
}

double ref_recall(const std::vector<Prediction>& preds, const std::vector<TimeSpan>& gts,
                  std::size_t n, double m) {
  std::size_t hits = 0;
  for (std::size_t q = 0; q < preds.size(); ++q) {
    bool found = false;
    for (std::size_t k = 0; k < preds[q].ranked.size() && k < n; ++k) {
      found = found || ref_span_iou(preds[q].ranked[k].span, gts[q]) >= m - 1e-9;
    }
    hits += found;
  }
  return 100.0 * hits / preds.size();
}

Interval random_interval(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::size_t a = pick(rng), b = pick(rng);
  if (a > b) std::swap(a, b);
  return {a, b};
}

// -- shared runs ----------------------------------------------------------

struct Runs {
  config::RunConfig cfg;
  synthdata::Corpus train, val, test;
  std::vector<eval::MetricsReport> reports;  // every evaluation, for criterion 9
  std::size_t audited = 0;
  std::vector<std::unique_ptr<encoders::MatchingModel>> full;  // BCE + all MM, per seed
  double full_seconds = 0.0;

  Runs() : cfg(config::resolve(std::nullopt, {}, 0)) {
    const auto corpus = synthdata::generate(cfg.generate, kCorpusSeed);
    train = corpus.split("train");
    val = corpus.split("val");
    test = corpus.split("test");
  }

  eval::EvalConfig eval_config(const trainer::TrainConfig& t, ScoreSource source) const {
    eval::EvalConfig e = t.eval;
    e.grid = t.grid;
    e.source = source;
    e.amplification = t.loss.amplification;
    e.fusion = t.loss.fusion;
    return e;
  }

  std::unique_ptr<encoders::MatchingModel> fit(trainer::TrainConfig t, std::uint64_t seed) {
    t.seed = seed;
    auto r = trainer::train(train, val, t);
    for (const auto& s : r.log.steps) audited += s.audited;
    for (const auto& e : r.log.epochs) {
      if (e.validation) reports.push_back(*e.validation);
    }
    return std::move(r.model);
  }

  double r1(const encoders::MatchingModel& model, const trainer::TrainConfig& t,
            ScoreSource source) {
    auto report = eval::evaluate(model, test, eval_config(t, source)).report;
    reports.push_back(report);
    return report.at(1, 0.5);
  }

  void keep(const eval::SanityResult& s) {
    reports.push_back(s.ordered);
    reports.push_back(s.shuffled);
  }

  const trainer::TrainConfig& full_config() const { return cfg.train; }

  trainer::TrainConfig bce_only_config() const {
    auto t = cfg.train;
    t.negatives.moment_intra = t.negatives.moment_inter = false;
    t.negatives.sent_intra = t.negatives.sent_inter = false;
    t.loss.lambda = 0.0;
    return t;
  }

  trainer::TrainConfig mm_only_config() const {
    auto t = cfg.train;
    t.loss.bce_weight = 0.0;
    return t;
  }

  void ensure_full() {
    if (!full.empty()) return;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t s = 0; s < kSeeds; ++s) full.push_back(fit(full_config(), s));
    full_seconds = seconds_since(t0);
  }
};

// -- criteria ---------------------------------------------------------------

Outcome gradient_correctness(Runs&) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto checks = cli::loss_grad_checks(0, 10);
  const double elapsed = seconds_since(t0);
  Outcome o{elapsed < 60.0, ""};
  for (const auto& c : checks) {
    o.pass = o.pass && c.instances == 10 && c.max_rel_error < 1e-4;
    std::ostringstream err;
    err << c.loss << " " << std::scientific << c.max_rel_error << ", ";
    o.detail += err.str();
  }
  o.detail += fmt(elapsed, 1) + " s";
  if (checks.size() != 3) o.pass = false;
  return o;
}

Outcome oracle_equivalence(Runs&) {
  std::size_t bad_iou = 0, bad_scale = 0, bad_mask = 0, bad_map = 0, bad_nms = 0, bad_rank = 0;
  for (std::size_t s = 0; s < kOracleInstances; ++s) {
    std::mt19937_64 rng(90000 + s);
    std::uniform_int_distribution<std::size_t> pick_n(1, 32);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const std::size_t n = pick_n(rng);
    const std::size_t g = std::uniform_int_distribution<std::size_t>(1, n)(rng);

    // temporal_iou on grid intervals and on spans
    const Interval a = random_interval(rng, n), b = random_interval(rng, n);
    if (std::abs(momentmap::temporal_iou(a, b) - ref_interval_iou(a, b)) > 1e-12) ++bad_iou;
    double x0 = 10 * unit(rng), x1 = 10 * unit(rng), y0 = 10 * unit(rng), y1 = 10 * unit(rng);
    if (x0 > x1) std::swap(x0, x1);
    if (y0 > y1) std::swap(y0, y1);
    if (x1 - x0 > 1e-6 && y1 - y0 > 1e-6) {
      const TimeSpan sa{x0, x1}, sb{y0, y1};
      if (std::abs(momentmap::temporal_iou(sa, sb) - ref_span_iou(sa, sb)) > 1e-12) ++bad_iou;
    }

    // scale_iou
    const double lo = 0.9 * unit(rng), hi = lo + 0.05 + (1.0 - lo) * unit(rng);
    const double iou = unit(rng);
    if (std::abs(momentmap::scale_iou(iou, lo, hi) - ref_scale_iou(iou, lo, hi)) > 1e-12) {
      ++bad_scale;
    }

    // valid_mask
    const auto mask = momentmap::valid_mask(n, g);
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (mask.valid(i, j) != ref_mask(i, j, g)) ++bad_mask;
        count += ref_mask(i, j, g);
      }
    }
    if (mask.count() != count) ++bad_mask;

    // build_moment_map
    const std::size_t d = 1 + s % 5;
    momentmap::ClipFeatures clips{mmn::testing::random_tensor({n, d}, rng), 1.0};
    const auto grid = momentmap::build_moment_map(clips, mask);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t c = 0; c < d; ++c) {
          double want = 0.0;
          if (ref_mask(i, j, g)) {
            want = clips.features.at(i, c);
            for (std::size_t r = i; r <= j; ++r) want = std::max(want, clips.features.at(r, c));
          }
          if (grid.features.at(i, j, c) != want) ++bad_map;
        }
      }
    }

    // nms, with coarse scores to force ties
    std::vector<Candidate> cands(1 + s % 60);
    for (auto& c : cands) c = {random_interval(rng, n), std::floor(10 * unit(rng)) / 10.0};
    const double theta = 0.05 + 0.9 * unit(rng);
    const auto got = eval::nms(cands, theta);
    const auto want = ref_nms(cands, theta);
    if (got.size() != want.size()) {
      ++bad_nms;
    } else {
      for (std::size_t k = 0; k < got.size(); ++k) {
        if (!(got[k].interval == want[k].interval) || got[k].score != want[k].score) {
          ++bad_nms;
          break;
        }
      }
    }

    // rank_n_at_m on grid-aligned spans, so exact threshold hits occur
    const double duration = 5.0 + 50.0 * unit(rng);
    const std::size_t queries = 1 + s % 12;
    std::vector<Prediction> preds(queries);
    std::vector<TimeSpan> gts(queries);
    for (std::size_t q = 0; q < queries; ++q) {
      gts[q] = momentmap::index_to_time(random_interval(rng, n), n, duration);
      preds[q].ranked.resize(s % 7);
      for (auto& r : preds[q].ranked) {
        r = {momentmap::index_to_time(random_interval(rng, n), n, duration), unit(rng)};
      }
    }
    const std::size_t top = 1 + s % 5;
    const double m = 0.1 * static_cast<double>(1 + s % 9);
    if (eval::rank_n_at_m(preds, gts, top, m) != ref_recall(preds, gts, top, m)) ++bad_rank;
  }
  const std::size_t total = bad_iou + bad_scale + bad_mask + bad_map + bad_nms + bad_rank;
  return {total == 0, "mismatches iou " + std::to_string(bad_iou) + ", scale_iou " +
                          std::to_string(bad_scale) + ", valid_mask " + std::to_string(bad_mask) +
                          ", moment_map " + std::to_string(bad_map) + ", nms " +
                          std::to_string(bad_nms) + ", rank " + std::to_string(bad_rank) +
                          " over " + std::to_string(kOracleInstances) + " instances"};
}

Outcome closed_form(Runs&) {
  const double neg[] = {0.3};
  const double p = losses::pair_positive_prob(0.8, neg, 0.1, 0.1);
  const double want = 1.0 / (1.0 + std::exp(-4.0));
  const double eq[] = {0.37};
  const double half = losses::pair_positive_prob(0.37, eq, 0.0, 0.1);
  std::ostringstream os;
  os.precision(12);
  os << "p = " << p << " (want " << want << "), equal logits " << half;
  return {std::abs(p - 0.982014) <= 1e-5 && std::abs(half - 0.5) <= 1e-12, os.str()};
}

Outcome matching_benefit(Runs& runs) {
  runs.ensure_full();
  const auto bce_cfg = runs.bce_only_config();
  const auto t0 = std::chrono::steady_clock::now();
  double sum_full = 0.0, sum_bce = 0.0;
  std::size_t wins = 0;
  std::string per_seed;
  for (std::size_t s = 0; s < kSeeds; ++s) {
    const double full = runs.r1(*runs.full[s], runs.full_config(),
                                runs.full_config().resolved_source());
    auto bce_model = runs.fit(bce_cfg, s);
    const double bce = runs.r1(*bce_model, bce_cfg, bce_cfg.resolved_source());
    sum_full += full;
    sum_bce += bce;
    wins += full > bce;
    per_seed += " " + fmt(full, 0) + "/" + fmt(bce, 0);
  }
  const double elapsed = runs.full_seconds + seconds_since(t0);
  const double gain = (sum_full - sum_bce) / kSeeds;
  return {gain > 0.0 && wins >= 2 && elapsed < 600.0,
          "BCE+MM " + fmt(sum_full / kSeeds) + " vs BCE-only " + fmt(sum_bce / kSeeds) +
              ", wins " + std::to_string(wins) + "/3 (seeds" + per_seed + "), " +
              fmt(elapsed, 0) + " s"};
}

Outcome mm_only(Runs& runs) {
  const auto t = runs.mm_only_config();
  const double baseline = eval::random_baseline(runs.test, t.grid, 0.5);
  bool pass = true;
  std::string per_seed;
  for (std::size_t s = 0; s < kSeeds; ++s) {
    auto model = runs.fit(t, s);
    const double r = runs.r1(*model, t, t.resolved_source());
    pass = pass && r >= baseline + 10.0;
    per_seed += " " + fmt(r, 0);
  }
  return {pass, "MM-only R@1 per seed" + per_seed + " vs random baseline " + fmt(baseline)};
}

Outcome sanity_gap(Runs& runs) {
  runs.ensure_full();
  const auto& t = runs.full_config();
  const auto e = runs.eval_config(t, t.resolved_source());
  bool trained_ok = true;
  std::string trained;
  for (std::size_t s = 0; s < kSeeds; ++s) {
    const auto r = eval::sanity_check(*runs.full[s], runs.test, e, runs.cfg.permutation_seed);
    runs.keep(r);
    const double gap = r.gap.at(kR1);
    trained_ok = trained_ok && gap > 5.0;
    trained += " " + fmt(gap, 0);
  }
  // Each permutation seed is paired with a fresh initialization, so the
  // average covers both sources of chance agreement.
  double untrained = 0.0;
  for (std::uint64_t k = 0; k < 10; ++k) {
    auto u = t;
    u.seed = k;
    const auto model = trainer::make_model(u, runs.train);
    const auto r = eval::sanity_check(*model, runs.test, e, 1000 + k);
    runs.keep(r);
    untrained += r.gap.at(kR1) / 10.0;
  }
  return {trained_ok && std::abs(untrained) <= 2.0,
          "trained gap per seed" + trained + ", untrained mean gap " + fmt(untrained)};
}

Outcome score_fusion(Runs& runs) {
  runs.ensure_full();
  const auto& t = runs.full_config();
  double fused = 0.0, iou = 0.0, mm = 0.0;
  for (std::size_t s = 0; s < kSeeds; ++s) {
    fused += runs.r1(*runs.full[s], t, ScoreSource::kFused) / kSeeds;
    iou += runs.r1(*runs.full[s], t, ScoreSource::kIou) / kSeeds;
    mm += runs.r1(*runs.full[s], t, ScoreSource::kMatching) / kSeeds;
  }
  return {fused >= std::max(iou, mm) - 1.0,
          "fused " + fmt(fused) + ", iou " + fmt(iou) + ", mm " + fmt(mm)};
}

Outcome determinism(Runs&) {
  mmn::testing::TempDir dir("acceptance");
  const auto data = (dir / "corpus").string();
  if (cli::run({"mmn", "generate", "--seed", std::to_string(kCorpusSeed), "--out", data}) != 0) {
    return {false, "generate failed"};
  }
  for (const char* run : {"r1", "r2"}) {
    if (cli::run({"mmn", "train", "--data", data, "--seed", "0", "--out", (dir / run).string()}) !=
        0) {
      return {false, std::string("train ") + run + " failed"};
    }
  }
  bool same = true;
  std::string detail;
  for (const char* f : {"checkpoint.bin", "train-log.jsonl"}) {
    const auto a = mmn::testing::read_file(dir / "r1" / f);
    const auto b = mmn::testing::read_file(dir / "r2" / f);
    same = same && !a.empty() && a == b;
    detail += std::string(f) + " " + std::to_string(a.size()) + (a == b ? " identical, " : " differ, ");
  }
  detail.resize(detail.size() - 2);
  return {same, detail};
}

Outcome metric_sanity(Runs& runs) {
  runs.ensure_full();
  std::size_t violations = 0;
  std::string first;
  for (const auto& r : runs.reports) {
    const auto issues = eval::check_metrics(r, runs.cfg.train.eval);
    violations += issues.size();
    if (first.empty() && !issues.empty()) first = ": " + issues.front();
  }
  // The auditor throws during training on any violating negative, so
  // reaching this point means every audited anchor was clean.
  return {violations == 0 && runs.audited > 0 && !runs.reports.empty(),
          std::to_string(runs.reports.size()) + " evaluations, " + std::to_string(violations) +
              " violations, " + std::to_string(runs.audited) + " anchors audited" + first};
}

Outcome overfit(Runs& runs) {
  auto gp = runs.cfg.generate;
  gp.train_videos = 2;
  gp.val_videos = 0;
  gp.test_videos = 0;
  const auto tiny = synthdata::generate(gp, kCorpusSeed);
  auto t = runs.cfg.train;
  t.batch_size = 2;  // the whole corpus
  t.epochs = 500;
  trainer::TrainOptions options;
  options.max_steps = 500;
  double best = INFINITY;
  std::size_t at = 0;
  options.on_step = [&](const trainer::StepRecord& r) {
    if (r.total < best) {
      best = r.total;
      at = r.step;
    }
    return best >= 0.1;
  };
  trainer::train(tiny, synthdata::Corpus{}, t, options);
  return {best < 0.1, "L_total " + fmt(best, 4) + " at step " + std::to_string(at)};
}

}  // namespace
}  // namespace mmn::acceptance

int main() {
  using namespace mmn::acceptance;
  struct Entry {
    const char* name;
    std::function<Outcome(Runs&)> check;
  };
  const Entry criteria[] = {
      {"1 gradient correctness", gradient_correctness},
      {"2 oracle equivalence", oracle_equivalence},
      {"3 closed-form pair probability", closed_form},
      {"4 mutual-matching benefit", matching_benefit},
      {"5 MM-only viability", mm_only},
      {"6 sanity-check gap", sanity_gap},
      {"7 score fusion", score_fusion},
      {"8 determinism", determinism},
      {"9 metric sanity", metric_sanity},
      {"10 overfit probe", overfit},
  };
  Runs runs;
  int failed = 0;
  for (const auto& c : criteria) {
    Outcome o;
    try {
      o = c.check(runs);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << c.name << " -- " << o.detail << std::endl;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : "all criteria passed")
            << std::endl;
  return failed ? 1 : 0;
}
