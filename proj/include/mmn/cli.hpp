#ifndef MMN_CLI_HPP_
#define MMN_CLI_HPP_

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmn/config.hpp"

namespace mmn::cli {

enum ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kData = 2,
  kGate = 3,
};

struct LossGradCheck {
  std::string loss;  // "bce", "mm" or "total"
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t instances = 0;
  std::size_t kinks = 0;  // coordinates re-checked on a finer step
};

// Finite-difference check of the three training losses on seeded 2-video
// batches (N = 8, joint width 16).
std::vector<LossGradCheck> loss_grad_checks(std::uint64_t seed, std::size_t instances);

struct AblationRow {
  std::string name;
  nlohmann::json overrides;  // applied to the "train" section
};

// bce-only, bce+moment-intra, bce+sent-intra, bce+sent-inter, bce+all,
// mm-only, subsample-matched, agg-avg, agg-cls.
std::vector<AblationRow> ablation_rows();

// Trains and evaluates every row for every seed on the corpus in
// `data_dir`; the table is also written to out_dir/ablation.json.
nlohmann::json ablate(const config::RunConfig& cfg, const std::string& data_dir,
                      const std::string& out_dir, std::ostream& log);

int run(int argc, char** argv);
int run(const std::vector<std::string>& args);

}  // namespace mmn::cli

#endif  // MMN_CLI_HPP_
