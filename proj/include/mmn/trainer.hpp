#ifndef MMN_TRAINER_HPP_
#define MMN_TRAINER_HPP_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmn/encoders.hpp"
#include "mmn/eval.hpp"
#include "mmn/losses.hpp"
#include "mmn/negatives.hpp"
#include "mmn/synthdata.hpp"

namespace mmn::trainer {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double lang_lr_ratio = 0.1;  // token embedding steps at ratio * lr
  double weight_decay = 0.01;
  double grad_clip = 10.0;     // global norm; 0 disables
  std::uint64_t seed = 0;
  std::optional<std::size_t> mm_stop_epoch;  // epochs >= this train with lambda = 0
  double audit_rate = 0.01;    // fraction of anchors audited per step
  std::size_t validate_every = 1;
  // "auto": fused when both losses train, else the branch that trains.
  std::string eval_source = "auto";
  losses::LossConfig loss;
  negatives::NegativeConfig negatives;
  encoders::EncoderConfig encoder;
  momentmap::GridConfig grid;
  eval::EvalConfig eval;

  void validate() const;
  eval::ScoreSource resolved_source() const;
  bool uses_matching() const { return negatives.any_enabled(); }
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double bce = 0.0;
  double mm = 0.0;
  double total = 0.0;
  double lambda = 0.0;  // effective weight of mm this step
  double grad_norm = 0.0;
  bool clipped = false;
  bool mm_evaluated = false;
  std::size_t anchors = 0;
  std::size_t audited = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_total = 0.0;
  std::optional<eval::MetricsReport> validation;
  double selection_metric = 0.0;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  double wall_clock_seconds = 0.0;
};

nlohmann::json step_json(const StepRecord& r);
nlohmann::json epoch_json(const EpochRecord& r);
// One JSON object per line: steps, then one epoch summary per epoch, in
// execution order. No timing fields, so equal runs give equal bytes.
std::string log_jsonl(const TrainLog& log);

struct TrainResult {
  std::unique_ptr<encoders::MatchingModel> model;  // best validation epoch
  TrainLog log;
  std::size_t best_epoch = 0;
  double best_metric = -1.0;
};

// Called after every step; return false to stop early.
using StepCallback = std::function<bool(const StepRecord&)>;

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // checkpoint.bin, train-log.jsonl, timing.json
  StepCallback on_step;
  // Optimization steps (batches) to cap the run at; 0 = full epochs.
  std::size_t max_steps = 0;
};

// Encoder vocabulary and input width are taken from the training corpus.
// An empty validation corpus keeps the last epoch.
TrainResult train(const synthdata::Corpus& train_corpus, const synthdata::Corpus& val_corpus,
                  const TrainConfig& cfg, const TrainOptions& options = {});

encoders::EncoderConfig resolve_encoder(const TrainConfig& cfg, const synthdata::Corpus& corpus);
std::unique_ptr<encoders::MatchingModel> make_model(const TrainConfig& cfg,
                                                    const synthdata::Corpus& corpus);

void save_model(const std::filesystem::path& path, const encoders::MatchingModel& model,
                const nlohmann::json& extra = nlohmann::json::object());
std::unique_ptr<encoders::MatchingModel> load_model(const std::filesystem::path& path);

// Evaluates a saved checkpoint; never mutates it.
eval::MetricsReport validate(const std::filesystem::path& checkpoint,
                             const synthdata::Corpus& corpus, const eval::EvalConfig& cfg);

}  // namespace mmn::trainer

#endif  // MMN_TRAINER_HPP_
