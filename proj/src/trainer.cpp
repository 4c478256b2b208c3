#include "mmn/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "mmn/adamw.hpp"
#include "mmn/checkpoint.hpp"
#include "mmn/error.hpp"

namespace mmn::trainer {

using diffcore::Graph;
using diffcore::Tensor;

namespace {

constexpr std::uint64_t kNegativeStream = 0x6e656761746976ULL;

nlohmann::json negatives_json(const negatives::NegativeConfig& c) {
  return {{"moment_intra", c.moment_intra},
          {"moment_inter", c.moment_inter},
          {"sent_intra", c.sent_intra},
          {"sent_inter", c.sent_inter},
          {"moment_iou", c.moment_iou},
          {"sentence_iou", c.sentence_iou},
          {"cap", c.cap},
          {"subsample", c.subsample == negatives::Subsample::kMatchIntra ? "match-intra" : "none"}};
}

negatives::NegativeConfig negatives_from_json(const nlohmann::json& j) {
  negatives::NegativeConfig c;
  c.moment_intra = j.at("moment_intra");
  c.moment_inter = j.at("moment_inter");
  c.sent_intra = j.at("sent_intra");
  c.sent_inter = j.at("sent_inter");
  c.moment_iou = j.at("moment_iou");
  c.sentence_iou = j.at("sentence_iou");
  c.cap = j.at("cap");
  const std::string s = j.at("subsample");
  if (s == "none") {
    c.subsample = negatives::Subsample::kNone;
  } else if (s == "match-intra") {
    c.subsample = negatives::Subsample::kMatchIntra;
  } else {
    throw InvalidArgument("negatives.subsample must be 'none' or 'match-intra', got '" + s + "'");
  }
  return c;
}

std::string diagnostics(const diffcore::ParameterStore& params) {
  std::ostringstream os;
  for (const auto& p : params.all()) {
    double vmax = 0.0, gmax = 0.0;
    bool vbad = false, gbad = false;
    for (double v : p.value.values()) {
      if (!std::isfinite(v)) vbad = true;
      vmax = std::max(vmax, std::fabs(v));
    }
    for (double g : p.grad.values()) {
      if (!std::isfinite(g)) gbad = true;
      gmax = std::max(gmax, std::fabs(g));
    }
    os << "\n  " << p.name << ": max|value| " << vmax << (vbad ? " (non-finite)" : "")
       << ", max|grad| " << gmax << (gbad ? " (non-finite)" : "");
  }
  return os.str();
}

std::vector<Tensor> snapshot(const diffcore::ParameterStore& params) {
  std::vector<Tensor> out;
  for (const auto& p : params.all()) out.push_back(p.value);
  return out;
}

void restore(diffcore::ParameterStore& params, const std::vector<Tensor>& values) {
  std::size_t k = 0;
  for (auto& p : params.all()) p.value = values[k++];
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << text;
  if (!os) throw Error("failed writing " + path.string());
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw InvalidArgument("train: epochs must be >= 1");
  if (batch_size < 1) throw InvalidArgument("train: batch_size must be >= 1");
  if (!(lr > 0.0)) throw InvalidArgument("train: lr must be > 0");
  if (!(lang_lr_ratio > 0.0 && lang_lr_ratio <= 1.0)) {
    throw InvalidArgument("train: lang_lr_ratio must lie in (0, 1]");
  }
  if (!(weight_decay >= 0.0)) throw InvalidArgument("train: weight_decay must be >= 0");
  if (!(grad_clip >= 0.0)) throw InvalidArgument("train: grad_clip must be >= 0");
  if (!(audit_rate >= 0.0 && audit_rate <= 1.0)) {
    throw InvalidArgument("train: audit_rate must lie in [0, 1]");
  }
  if (validate_every < 1) throw InvalidArgument("train: validate_every must be >= 1");
  if (eval_source != "auto") eval::score_source_from_string(eval_source);
  loss.validate();
  negatives.validate();
  encoder.validate();
  eval.validate();
  if (!negatives.any_enabled() && loss.bce_weight == 0.0) {
    throw InvalidArgument("train: bce_weight is 0 and every negative family is disabled");
  }
  if (!negatives.any_enabled() && loss.lambda > 0.0) {
    throw InvalidArgument("train: lambda > 0 needs at least one negative family");
  }
}

eval::ScoreSource TrainConfig::resolved_source() const {
  if (eval_source != "auto") return eval::score_source_from_string(eval_source);
  const bool mm = negatives.any_enabled() && loss.lambda > 0.0;
  if (!mm) return eval::ScoreSource::kIou;
  if (loss.bce_weight == 0.0) return eval::ScoreSource::kMatching;
  return eval::ScoreSource::kFused;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"lang_lr_ratio", c.lang_lr_ratio},
       {"weight_decay", c.weight_decay},
       {"grad_clip", c.grad_clip},
       {"seed", c.seed},
       {"mm_stop_epoch", c.mm_stop_epoch ? nlohmann::json(*c.mm_stop_epoch) : nlohmann::json()},
       {"audit_rate", c.audit_rate},
       {"validate_every", c.validate_every},
       {"eval_source", c.eval_source},
       {"loss", c.loss},
       {"negatives", negatives_json(c.negatives)},
       {"encoder", c.encoder},
       {"grid", {{"num_clips", c.grid.num_clips}, {"dense_threshold", c.grid.dense_threshold}}},
       {"eval", c.eval}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.epochs = j.at("epochs");
  c.batch_size = j.at("batch_size");
  c.lr = j.at("lr");
  c.lang_lr_ratio = j.at("lang_lr_ratio");
  c.weight_decay = j.at("weight_decay");
  c.grad_clip = j.at("grad_clip");
  c.seed = j.at("seed");
  if (j.at("mm_stop_epoch").is_null()) {
    c.mm_stop_epoch.reset();
  } else {
    c.mm_stop_epoch = j.at("mm_stop_epoch").get<std::size_t>();
  }
  c.audit_rate = j.at("audit_rate");
  c.validate_every = j.at("validate_every");
  c.eval_source = j.at("eval_source");
  c.loss = j.at("loss").get<losses::LossConfig>();
  c.negatives = negatives_from_json(j.at("negatives"));
  c.encoder = j.at("encoder").get<encoders::EncoderConfig>();
  c.grid.num_clips = j.at("grid").at("num_clips");
  c.grid.dense_threshold = j.at("grid").at("dense_threshold");
  c.eval = j.at("eval").get<eval::EvalConfig>();
  c.eval.grid = c.grid;
}

nlohmann::json step_json(const StepRecord& r) {
  return {{"type", "step"},     {"step", r.step},
          {"epoch", r.epoch},   {"bce", r.bce},
          {"mm", r.mm},         {"total", r.total},
          {"lambda", r.lambda}, {"grad_norm", r.grad_norm},
          {"clipped", r.clipped}, {"mm_evaluated", r.mm_evaluated},
          {"anchors", r.anchors}, {"audited", r.audited}};
}

nlohmann::json epoch_json(const EpochRecord& r) {
  nlohmann::json j = {{"type", "epoch"},
                      {"epoch", r.epoch},
                      {"mean_total", r.mean_total},
                      {"selection_metric", r.selection_metric}};
  if (r.validation) j["validation"] = eval::metrics_json(*r.validation);
  return j;
}

std::string log_jsonl(const TrainLog& log) {
  std::string out;
  std::size_t s = 0;
  for (const auto& e : log.epochs) {
    while (s < log.steps.size() && log.steps[s].epoch <= e.epoch) {
      out += step_json(log.steps[s++]).dump() + "\n";
    }
    out += epoch_json(e).dump() + "\n";
  }
  while (s < log.steps.size()) out += step_json(log.steps[s++]).dump() + "\n";
  return out;
}

encoders::EncoderConfig resolve_encoder(const TrainConfig& cfg, const synthdata::Corpus& corpus) {
  encoders::EncoderConfig e = cfg.encoder;
  e.vocab_size = corpus.vocab_size;
  e.input_dim = corpus.feature_dim;
  return e;
}

std::unique_ptr<encoders::MatchingModel> make_model(const TrainConfig& cfg,
                                                    const synthdata::Corpus& corpus) {
  auto model = std::make_unique<encoders::MatchingModel>(resolve_encoder(cfg, corpus),
                                                         negatives::mix_seed(cfg.seed, 1));
  model->params().get("lang.embedding").lr_scale = cfg.lang_lr_ratio;
  return model;
}

TrainResult train(const synthdata::Corpus& train_corpus, const synthdata::Corpus& val_corpus,
                  const TrainConfig& cfg_in, const TrainOptions& options) {
  const auto started = std::chrono::steady_clock::now();
  TrainConfig cfg = cfg_in;
  cfg.eval.grid = cfg.grid;
  cfg.eval.source = cfg.resolved_source();
  cfg.eval.amplification = cfg.loss.amplification;
  cfg.eval.fusion = cfg.loss.fusion;
  cfg.validate();
  if (train_corpus.videos.empty()) throw DataError("train: empty training corpus");

  TrainResult result;
  result.model = make_model(cfg, train_corpus);
  auto& params = result.model->params();
  diffcore::AdamWState opt;
  opt.config.lr = cfg.lr;
  opt.config.weight_decay = cfg.weight_decay;

  const bool matching = cfg.uses_matching();
  std::vector<Tensor> best;
  std::size_t step = 0;
  std::size_t anchors_seen = 0;
  bool stop = false;
  for (std::size_t epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    const double lambda =
        (cfg.mm_stop_epoch && epoch >= *cfg.mm_stop_epoch) ? 0.0 : cfg.loss.lambda;
    const auto batches = negatives::epoch_batches(train_corpus.videos.size(), cfg.batch_size,
                                                  cfg.seed, epoch);
    double epoch_total = 0.0;
    std::size_t epoch_steps = 0;
    for (const auto& indices : batches) {
      const auto batch = negatives::assemble_batch(train_corpus, indices, cfg.grid);
      StepRecord rec;
      rec.step = step;
      rec.epoch = epoch;
      rec.anchors = batch.anchors.size();
      rec.lambda = lambda;

      std::vector<negatives::NegativeSets> sets;
      if (matching) {
        const std::uint64_t s = negatives::mix_seed(cfg.seed ^ kNegativeStream, step);
        bool any = false;
        for (std::size_t a = 0; a < batch.anchors.size(); ++a) {
          sets.push_back(negatives::build_negative_sets(batch, a, cfg.negatives, s));
          any = any || !sets.back().empty();
          const double before = std::floor(static_cast<double>(anchors_seen) * cfg.audit_rate);
          const double after = std::floor(static_cast<double>(anchors_seen + 1) * cfg.audit_rate);
          ++anchors_seen;
          if (after > before) {
            const auto issues = negatives::audit_negative_sets(batch, a, sets.back(), cfg.negatives);
            if (!issues.empty()) {
              throw Error("negative audit failed at step " + std::to_string(step) + ": " + issues[0]);
            }
            ++rec.audited;
          }
        }
        if (!any) sets.clear();
      }

      Graph g;
      auto obj = losses::batch_objective(g, *result.model, batch, sets, cfg.loss, lambda);
      rec.bce = obj.report.bce;
      rec.mm = obj.report.mm;
      rec.total = obj.report.total;
      rec.mm_evaluated = obj.mm.valid();
      if (!std::isfinite(rec.total) || !std::isfinite(rec.bce) || !std::isfinite(rec.mm)) {
        throw NumericError("non-finite loss at step " + std::to_string(step) + " (bce " +
                           std::to_string(rec.bce) + ", mm " + std::to_string(rec.mm) +
                           "); parameters:" + diagnostics(params));
      }
      params.zero_grad();
      g.backward(obj.total);
      rec.grad_norm = params.grad_norm();
      if (!std::isfinite(rec.grad_norm)) {
        throw NumericError("non-finite gradient at step " + std::to_string(step) +
                           "; parameters:" + diagnostics(params));
      }
      if (cfg.grad_clip > 0.0 && rec.grad_norm > cfg.grad_clip) {
        const double f = cfg.grad_clip / rec.grad_norm;
        for (auto& p : params.all()) {
          for (double& v : p.grad.values()) v *= f;
        }
        rec.clipped = true;
      }
      diffcore::adamw_step(params, opt);

      epoch_total += rec.total;
      ++epoch_steps;
      result.log.steps.push_back(rec);
      ++step;
      if (options.on_step && !options.on_step(rec)) stop = true;
      if (options.max_steps > 0 && step >= options.max_steps) stop = true;
      if (stop) break;
    }

    EpochRecord er;
    er.epoch = epoch;
    er.mean_total = epoch_steps ? epoch_total / static_cast<double>(epoch_steps) : 0.0;
    const bool last = stop || epoch + 1 == cfg.epochs;
    if (!val_corpus.videos.empty() && ((epoch + 1) % cfg.validate_every == 0 || last)) {
      er.validation = eval::evaluate(*result.model, val_corpus, cfg.eval).report;
      er.selection_metric = er.validation->at(1, 0.5);
      if (er.selection_metric > result.best_metric) {
        result.best_metric = er.selection_metric;
        result.best_epoch = epoch;
        best = snapshot(params);
      }
    } else if (val_corpus.videos.empty()) {
      result.best_epoch = epoch;
    }
    result.log.epochs.push_back(std::move(er));
  }
  if (!best.empty()) restore(params, best);

  result.log.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    nlohmann::json meta = {{"train_config", cfg},
                           {"best_epoch", result.best_epoch},
                           {"best_metric", result.best_metric},
                           {"steps", step}};
    save_model(*options.out_dir / "checkpoint.bin", *result.model, meta);
    write_text(*options.out_dir / "train-log.jsonl", log_jsonl(result.log));
    write_text(*options.out_dir / "timing.json",
               nlohmann::json({{"wall_clock_seconds", result.log.wall_clock_seconds}}).dump(2) + "\n");
  }
  return result;
}

void save_model(const std::filesystem::path& path, const encoders::MatchingModel& model,
                const nlohmann::json& extra) {
  nlohmann::json meta = extra;
  meta["encoder"] = model.config();
  diffcore::save_checkpoint(path, model.params(), meta);
}

std::unique_ptr<encoders::MatchingModel> load_model(const std::filesystem::path& path) {
  const auto meta = diffcore::read_checkpoint_metadata(path);
  if (!meta.contains("encoder")) {
    throw DataError(path.string() + ": checkpoint metadata has no encoder configuration");
  }
  auto model = std::make_unique<encoders::MatchingModel>(meta["encoder"].get<encoders::EncoderConfig>(), 0);
  diffcore::load_checkpoint(path, model->params());
  return model;
}

eval::MetricsReport validate(const std::filesystem::path& checkpoint,
                             const synthdata::Corpus& corpus, const eval::EvalConfig& cfg) {
  const auto model = load_model(checkpoint);
  if (model->config().vocab_size < corpus.vocab_size ||
      model->config().input_dim != corpus.feature_dim) {
    throw ShapeError("validate: checkpoint expects vocabulary " +
                     std::to_string(model->config().vocab_size) + " and feature width " +
                     std::to_string(model->config().input_dim) + ", corpus has " +
                     std::to_string(corpus.vocab_size) + " and " +
                     std::to_string(corpus.feature_dim));
  }
  return eval::evaluate(*model, corpus, cfg).report;
}

}  // namespace mmn::trainer
