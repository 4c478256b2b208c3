#ifndef MMN_CONFIG_HPP_
#define MMN_CONFIG_HPP_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmn/synthdata.hpp"
#include "mmn/trainer.hpp"

namespace mmn::config {

// Everything a command reads. One JSON document drives all commands:
//   {"seed", "generate": GenParams, "train": TrainConfig without seed,
//    "ablate": {"seeds", "split"}, "sanity": {"permutation_seed", "split"},
//    "eval": {"split"}}
struct RunConfig {
  std::uint64_t seed = 0;
  synthdata::GenParams generate;
  trainer::TrainConfig train;
  std::vector<std::uint64_t> ablate_seeds{0, 1, 2};
  std::string ablate_split = "test";
  std::uint64_t permutation_seed = 1;
  std::string sanity_split = "test";
  std::string eval_split = "test";
};

nlohmann::json default_config_json();
nlohmann::json to_json(const RunConfig& c);
RunConfig from_json(const nlohmann::json& j);

// Overlays `patch` on `base`. Keys absent from `base` are rejected with the
// list of valid keys at that level.
void merge_strict(nlohmann::json& base, const nlohmann::json& patch, const std::string& where = "");

// "a.b.c=value". The value is parsed as JSON when possible, else taken as
// a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

// Defaults, then the optional file, then overrides, then the seed.
RunConfig resolve(const std::optional<std::filesystem::path>& file,
                  const std::vector<std::string>& overrides,
                  std::optional<std::uint64_t> seed);

}  // namespace mmn::config

#endif  // MMN_CONFIG_HPP_
