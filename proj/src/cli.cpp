#include "mmn/cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>

#include "mmn/error.hpp"
#include "mmn/eval.hpp"
#include "mmn/grad_check.hpp"
#include "mmn/losses.hpp"
#include "mmn/negatives.hpp"
#include "mmn/synthdata.hpp"
#include "mmn/trainer.hpp"

namespace mmn::cli {

namespace fs = std::filesystem;

namespace {

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << j.dump(2) << "\n";
  if (!os) throw Error("failed writing " + path.string());
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path.string());
  auto j = nlohmann::json::parse(is, nullptr, false);
  if (j.is_discarded()) throw DataError(path.string() + ": not valid JSON");
  return j;
}

void require_dir(const std::string& dir, const char* what) {
  if (!fs::is_directory(dir)) throw DataError(std::string(what) + " directory " + dir + " does not exist");
}

void prepare_out(const std::string& dir, const config::RunConfig& cfg) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create " + dir + ": " + ec.message());
  write_json(fs::path(dir) / "resolved-config.json", config::to_json(cfg));
}

synthdata::Corpus split_of(const synthdata::Corpus& corpus, const std::string& split) {
  auto part = corpus.split(split);
  if (part.videos.empty()) throw DataError("corpus has no '" + split + "' videos");
  return part;
}

nlohmann::json report_json(const eval::MetricsReport& r) {
  nlohmann::json bins = nlohmann::json::array();
  for (const auto& b : r.length_bins) {
    bins.push_back({{"lower", b.lower}, {"upper", b.upper}, {"count", b.count}, {"recall", b.recall}});
  }
  return {{"metrics", eval::metrics_json(r)}, {"queries", r.queries}, {"length_bins", bins}};
}

eval::EvalConfig eval_config(const trainer::TrainConfig& t) {
  eval::EvalConfig e = t.eval;
  e.grid = t.grid;
  e.source = t.resolved_source();
  e.amplification = t.loss.amplification;
  e.fusion = t.loss.fusion;
  return e;
}

void print_metrics(std::ostream& os, const eval::MetricsReport& r) {
  for (const auto& [k, v] : r.metrics) {
    os << "  " << k << " = " << std::fixed << std::setprecision(2) << v << "\n";
  }
  os.unsetf(std::ios::floatfield);
}

}  // namespace

std::vector<LossGradCheck> loss_grad_checks(std::uint64_t seed, std::size_t instances) {
  std::vector<LossGradCheck> out(3);
  out[0].loss = "bce";
  out[1].loss = "mm";
  out[2].loss = "total";
  for (std::size_t k = 0; k < instances; ++k) {
    const std::uint64_t s = negatives::mix_seed(seed, k);
    synthdata::GenParams gp;
    gp.train_videos = 2;
    gp.val_videos = 0;
    gp.test_videos = 0;
    gp.raw_clips = 16;
    gp.sampled_clips = 8;
    gp.feature_dim = 8;
    gp.concepts = 4;
    gp.tokens_per_concept = 2;
    gp.distractor_vocab = 4;
    gp.query_length = 4;
    const auto corpus = synthdata::generate(gp, s);

    trainer::TrainConfig tc;
    tc.seed = s;
    tc.grid = {8, 4};
    tc.encoder.token_dim = 8;
    tc.encoder.visual_dim = 8;
    tc.encoder.joint_dim = 16;
    tc.encoder.aggregation = k % 2 ? encoders::Aggregation::kCls : encoders::Aggregation::kAvg;
    auto model = trainer::make_model(tc, corpus);
    const std::size_t both[] = {0, 1};
    const auto batch = negatives::assemble_batch(corpus, both, tc.grid);
    std::vector<negatives::NegativeSets> sets;
    for (std::size_t a = 0; a < batch.anchors.size(); ++a) {
      sets.push_back(negatives::build_negative_sets(batch, a, tc.negatives, s));
    }
    for (auto& entry : out) {
      auto fn = [&](diffcore::Graph& g) {
        auto obj = losses::batch_objective(g, *model, batch, sets, tc.loss, tc.loss.lambda);
        if (entry.loss == "bce") return obj.bce;
        if (entry.loss == "mm") return obj.mm;
        return obj.total;
      };
      const auto r = diffcore::grad_check(fn, model->params());
      if (r.max_rel_error >= entry.max_rel_error) {
        entry.max_rel_error = r.max_rel_error;
        entry.worst_param = r.worst_param;
      }
      entry.kinks += r.kinks;
      ++entry.instances;
    }
  }
  return out;
}

std::vector<AblationRow> ablation_rows() {
  auto flags = [](bool mi, bool me, bool si, bool se) {
    return nlohmann::json{{"moment_intra", mi}, {"moment_inter", me}, {"sent_intra", si}, {"sent_inter", se}};
  };
  return {
      {"bce-only", {{"negatives", flags(false, false, false, false)}, {"loss", {{"lambda", 0.0}}}}},
      {"bce+moment-intra", {{"negatives", flags(true, false, false, false)}}},
      {"bce+sent-intra", {{"negatives", flags(false, false, true, false)}}},
      {"bce+sent-inter", {{"negatives", flags(false, false, false, true)}}},
      {"bce+all", {{"negatives", flags(true, true, true, true)}}},
      {"mm-only", {{"loss", {{"bce_weight", 0.0}}}}},
      {"subsample-matched", {{"negatives", {{"subsample", "match-intra"}}}}},
      {"agg-avg", {{"encoder", {{"aggregation", "avg"}}}}},
      {"agg-cls", {{"encoder", {{"aggregation", "cls"}}}}},
  };
}

nlohmann::json ablate(const config::RunConfig& cfg, const std::string& data_dir,
                      const std::string& out_dir, std::ostream& log) {
  if (cfg.ablate_seeds.empty()) throw UsageError("ablate: needs at least one seed");
  const auto corpus = synthdata::load_corpus(data_dir);
  const auto train_c = split_of(corpus, "train");
  const auto val_c = corpus.split("val");
  const auto test_c = split_of(corpus, cfg.ablate_split);

  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : ablation_rows()) {
    nlohmann::json entry = {{"name", row.name}, {"overrides", row.overrides}};
    nlohmann::json train_json = cfg.train;
    trainer::TrainConfig tc;
    try {
      config::merge_strict(train_json, row.overrides, "train");
      tc = train_json.get<trainer::TrainConfig>();
      tc.eval.grid = tc.grid;
      tc.validate();
    } catch (const std::exception& e) {
      entry["skipped"] = e.what();
      log << row.name << ": skipped (" << e.what() << ")\n";
      rows.push_back(entry);
      continue;
    }
    std::map<std::string, double> mean;
    nlohmann::json per_seed = nlohmann::json::array();
    for (std::uint64_t seed : cfg.ablate_seeds) {
      tc.seed = seed;
      auto result = trainer::train(train_c, val_c, tc);
      const auto report = eval::evaluate(*result.model, test_c, eval_config(tc)).report;
      per_seed.push_back({{"seed", seed}, {"metrics", eval::metrics_json(report)},
                          {"best_epoch", result.best_epoch}});
      for (const auto& [k, v] : report.metrics) mean[k] += v / static_cast<double>(cfg.ablate_seeds.size());
      log << row.name << " seed " << seed << ": R@1,IoU=0.5 = " << report.metrics.at("R@1,IoU=0.5") << "\n";
    }
    if (tc.negatives.any_enabled()) {
      const auto batch = negatives::assemble_batch(train_c, std::min(tc.batch_size, train_c.videos.size()),
                                                   tc.seed, tc.grid);
      double moments = 0.0, sentences = 0.0;
      for (std::size_t a = 0; a < batch.anchors.size(); ++a) {
        const auto sets = negatives::build_negative_sets(batch, a, tc.negatives, tc.seed);
        moments += static_cast<double>(sets.moments.size());
        sentences += static_cast<double>(sets.sentences.size());
      }
      const double n = static_cast<double>(batch.anchors.size());
      entry["mean_negative_moments"] = moments / n;
      entry["mean_negative_sentences"] = sentences / n;
    }
    entry["source"] = eval::to_string(tc.resolved_source());
    entry["per_seed"] = per_seed;
    entry["mean"] = mean;
    rows.push_back(entry);
  }
  nlohmann::json table = {{"split", cfg.ablate_split}, {"seeds", cfg.ablate_seeds}, {"rows", rows}};
  prepare_out(out_dir, cfg);
  write_json(fs::path(out_dir) / "ablation.json", table);
  return table;
}

int run(const std::vector<std::string>& args) {
  std::vector<char*> argv;
  std::vector<std::string> copy = args;
  for (auto& a : copy) argv.push_back(a.data());
  return run(static_cast<int>(argv.size()), argv.data());
}

int run(int argc, char** argv) {
  CLI::App app{"Moment localization with mutually matched video/sentence embeddings"};
  app.require_subcommand(1);

  std::string config_path, out_dir, data_dir, checkpoint, predictions, video_id, split;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::size_t query = 0, instances = 10;

  auto common = [&](CLI::App* c) {
    c->add_option("--config", config_path, "JSON configuration file");
    c->add_option("--seed", seed, "Seed (overrides the configuration)");
    c->add_option("--set", overrides, "Dotted override, e.g. train.epochs=5")->take_all();
  };
  auto* gen = app.add_subcommand("generate", "Write a synthetic corpus");
  common(gen);
  gen->add_option("--out", out_dir, "Corpus directory")->required();

  auto* tr = app.add_subcommand("train", "Train on the train split, select on val");
  common(tr);
  tr->add_option("--data", data_dir, "Corpus directory")->required();
  tr->add_option("--out", out_dir, "Run directory")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint or a predictions file");
  common(ev);
  ev->add_option("--data", data_dir, "Corpus directory")->required();
  auto* ck_opt = ev->add_option("--checkpoint", checkpoint, "Checkpoint file");
  auto* pr_opt = ev->add_option("--predictions", predictions, "Predictions JSON");
  ck_opt->excludes(pr_opt);
  ev->add_option("--split", split, "Split to evaluate (default from configuration)");
  ev->add_option("--out", out_dir, "Output directory")->required();

  auto* ab = app.add_subcommand("ablate", "Train and evaluate the ablation table");
  common(ab);
  ab->add_option("--data", data_dir, "Corpus directory")->required();
  ab->add_option("--out", out_dir, "Output directory")->required();

  auto* sc = app.add_subcommand("sanity-check", "Ordered vs shuffled clip evaluation");
  common(sc);
  sc->add_option("--data", data_dir, "Corpus directory")->required();
  sc->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  sc->add_option("--split", split, "Split to evaluate");
  sc->add_option("--out", out_dir, "Output directory")->required();

  auto* ex = app.add_subcommand("export-maps", "Write score maps and embeddings of one query");
  common(ex);
  ex->add_option("--data", data_dir, "Corpus directory")->required();
  ex->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  ex->add_option("--video", video_id, "Video id")->required();
  ex->add_option("--query", query, "Query index within the video");
  ex->add_option("--out", out_dir, "Output directory")->required();

  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of the losses");
  common(gc);
  gc->add_option("--instances", instances, "Seeded instances");

  auto* vf = app.add_subcommand("verify", "Check a corpus directory");
  common(vf);
  vf->add_option("--data", data_dir, "Corpus directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    const auto cfg = config::resolve(config_path.empty() ? std::nullopt
                                                         : std::optional<fs::path>(config_path),
                                     overrides, seed);
    if (gen->parsed()) {
      const auto manifest = synthdata::generate_corpus(cfg.generate, cfg.seed, out_dir);
      write_json(fs::path(out_dir) / "resolved-config.json", config::to_json(cfg));
      std::cout << "wrote " << manifest.videos.size() << " videos, " << manifest.queries.size()
                << " queries to " << out_dir << "\n";
      return kOk;
    }
    if (vf->parsed()) {
      require_dir(data_dir, "corpus");
      const auto issues = synthdata::verify_manifest(data_dir);
      for (const auto& i : issues) std::cout << "violation: " << i << "\n";
      std::cout << (issues.empty() ? "ok" : "FAILED") << " (" << issues.size() << " violations)\n";
      return issues.empty() ? kOk : kGate;
    }
    if (gc->parsed()) {
      bool ok = true;
      for (const auto& r : loss_grad_checks(cfg.seed, instances)) {
        const bool pass = r.max_rel_error < 1e-4;
        ok = ok && pass;
        std::cout << r.loss << ": max relative error " << std::scientific << r.max_rel_error
                  << std::defaultfloat << " over " << r.instances << " instances (worst "
                  << r.worst_param << ", " << r.kinks << " kinks refined) " << (pass ? "PASS" : "FAIL") << "\n";
      }
      return ok ? kOk : kGate;
    }
    if (tr->parsed()) {
      require_dir(data_dir, "corpus");
      const auto corpus = synthdata::load_corpus(data_dir);
      prepare_out(out_dir, cfg);
      trainer::TrainOptions opts;
      opts.out_dir = out_dir;
      auto result = trainer::train(split_of(corpus, "train"), corpus.split("val"), cfg.train, opts);
      nlohmann::json summary = {{"best_epoch", result.best_epoch},
                                {"best_metric", result.best_metric},
                                {"steps", result.log.steps.size()}};
      if (!result.log.epochs.empty() && result.log.epochs[result.best_epoch].validation) {
        summary["validation"] = report_json(*result.log.epochs[result.best_epoch].validation);
      }
      write_json(fs::path(out_dir) / "metrics.json", summary);
      std::cout << "best epoch " << result.best_epoch << ", val R@1,IoU=0.5 = " << result.best_metric
                << "\n";
      return kOk;
    }
    if (ev->parsed()) {
      require_dir(data_dir, "corpus");
      const auto corpus = synthdata::load_corpus(data_dir);
      const auto part = split_of(corpus, split.empty() ? cfg.eval_split : split);
      auto ecfg = eval_config(cfg.train);
      eval::EvalResult result;
      if (!predictions.empty()) {
        result = eval::evaluate_predictions(part, read_json(predictions), ecfg);
      } else if (!checkpoint.empty()) {
        const auto model = trainer::load_model(checkpoint);
        result = eval::evaluate(*model, part, ecfg);
      } else {
        throw UsageError("eval: give --checkpoint or --predictions");
      }
      prepare_out(out_dir, cfg);
      write_json(fs::path(out_dir) / "metrics.json", report_json(result.report));
      if (!checkpoint.empty()) write_json(fs::path(out_dir) / "predictions.json", eval::predictions_json(part, result));
      print_metrics(std::cout, result.report);
      const auto issues = eval::check_metrics(result.report, ecfg);
      for (const auto& i : issues) std::cout << "metric violation: " << i << "\n";
      return issues.empty() ? kOk : kGate;
    }
    if (sc->parsed()) {
      require_dir(data_dir, "corpus");
      const auto corpus = synthdata::load_corpus(data_dir);
      const auto part = split_of(corpus, split.empty() ? cfg.sanity_split : split);
      const auto model = trainer::load_model(checkpoint);
      const auto r = eval::sanity_check(*model, part, eval_config(cfg.train), cfg.permutation_seed);
      prepare_out(out_dir, cfg);
      write_json(fs::path(out_dir) / "sanity.json", {{"ordered", eval::metrics_json(r.ordered)},
                                                      {"shuffled", eval::metrics_json(r.shuffled)},
                                                      {"gap", r.gap},
                                                      {"permutation_seed", cfg.permutation_seed}});
      for (const auto& [k, v] : r.gap) std::cout << "  gap " << k << " = " << v << "\n";
      return kOk;
    }
    if (ex->parsed()) {
      require_dir(data_dir, "corpus");
      const auto corpus = synthdata::load_corpus(data_dir);
      const synthdata::Video* video = nullptr;
      for (const auto& v : corpus.videos) {
        if (v.id == video_id) video = &v;
      }
      if (!video) throw DataError("no video '" + video_id + "' in " + data_dir);
      const auto model = trainer::load_model(checkpoint);
      const auto r = eval::export_maps(*model, *video, query, eval_config(cfg.train), out_dir);
      write_json(fs::path(out_dir) / "resolved-config.json", config::to_json(cfg));
      std::cout << "top-1 cell (" << r.top1.start << ", " << r.top1.end << "); wrote " << r.fused_csv.string()
                << "\n";
      return kOk;
    }
    if (ab->parsed()) {
      require_dir(data_dir, "corpus");
      ablate(cfg, data_dir, out_dir, std::cout);
      return kOk;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}

}  // namespace mmn::cli
