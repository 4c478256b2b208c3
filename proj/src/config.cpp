#include "mmn/config.hpp"

#include <fstream>

#include "mmn/error.hpp"

namespace mmn::config {

namespace {

std::string valid_keys(const nlohmann::json& obj) {
  std::string out;
  for (const auto& [k, v] : obj.items()) {
    if (!out.empty()) out += ", ";
    out += k;
  }
  return out;
}

std::string join(const std::string& where, const std::string& key) {
  return where.empty() ? key : where + "." + key;
}

}  // namespace

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json train = c.train;
  train.erase("seed");
  return {{"seed", c.seed},
          {"generate", c.generate},
          {"train", train},
          {"ablate", {{"seeds", c.ablate_seeds}, {"split", c.ablate_split}}},
          {"sanity", {{"permutation_seed", c.permutation_seed}, {"split", c.sanity_split}}},
          {"eval", {{"split", c.eval_split}}}};
}

nlohmann::json default_config_json() { return to_json(RunConfig{}); }

RunConfig from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    c.seed = j.at("seed");
    c.generate = j.at("generate").get<synthdata::GenParams>();
    nlohmann::json train = j.at("train");
    train["seed"] = c.seed;
    c.train = train.get<trainer::TrainConfig>();
    c.ablate_seeds = j.at("ablate").at("seeds").get<std::vector<std::uint64_t>>();
    c.ablate_split = j.at("ablate").at("split");
    c.permutation_seed = j.at("sanity").at("permutation_seed");
    c.sanity_split = j.at("sanity").at("split");
    c.eval_split = j.at("eval").at("split");
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("configuration: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw UsageError(std::string("configuration: ") + e.what());
  }
  return c;
}

void merge_strict(nlohmann::json& base, const nlohmann::json& patch, const std::string& where) {
  if (!patch.is_object()) {
    throw UsageError("configuration" + (where.empty() ? std::string() : " '" + where + "'") +
                     ": expected an object");
  }
  for (const auto& [k, v] : patch.items()) {
    if (!base.contains(k)) {
      throw UsageError("unknown configuration key '" + join(where, k) + "'; valid keys: " +
                       valid_keys(base));
    }
    auto& slot = base[k];
    if (slot.is_object()) {
      merge_strict(slot, v, join(where, k));
    } else {
      slot = v;
    }
  }
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw UsageError("override '" + assignment + "' is not of the form key.path=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  nlohmann::json patch = value;
  std::vector<std::string> parts;
  std::size_t from = 0;
  while (true) {
    const auto dot = path.find('.', from);
    parts.push_back(path.substr(from, dot - from));
    if (dot == std::string::npos) break;
    from = dot + 1;
  }
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
    if (it->empty()) throw UsageError("override '" + assignment + "' has an empty key");
    patch = nlohmann::json{{*it, patch}};
  }
  merge_strict(doc, patch);
}

RunConfig resolve(const std::optional<std::filesystem::path>& file,
                  const std::vector<std::string>& overrides, std::optional<std::uint64_t> seed) {
  nlohmann::json doc = default_config_json();
  if (file) {
    std::ifstream is(*file);
    if (!is) throw DataError("cannot read configuration " + file->string());
    nlohmann::json loaded = nlohmann::json::parse(is, nullptr, false);
    if (loaded.is_discarded()) throw UsageError(file->string() + ": not valid JSON");
    merge_strict(doc, loaded);
  }
  for (const auto& o : overrides) apply_override(doc, o);
  if (seed) doc["seed"] = *seed;
  RunConfig c = from_json(doc);
  try {
    c.generate.validate();
    trainer::TrainConfig t = c.train;
    t.eval.grid = t.grid;
    t.validate();
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  return c;
}

}  // namespace mmn::config
