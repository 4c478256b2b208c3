#ifndef MMN_SYNTHDATA_HPP_
#define MMN_SYNTHDATA_HPP_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmn/momentmap.hpp"
#include "mmn/tensor.hpp"

namespace mmn::synthdata {

using diffcore::Tensor;

inline constexpr std::size_t kLengthBins = 10;

struct GenParams {
  std::size_t train_videos = 200;
  std::size_t val_videos = 50;
  std::size_t test_videos = 50;
  std::size_t raw_clips = 64;      // l
  std::size_t sampled_clips = 16;  // N used by consumers of the corpus
  std::size_t feature_dim = 32;
  std::size_t concepts = 8;
  std::size_t events_per_video = 2;
  double noise = 0.5;
  std::size_t tokens_per_concept = 2;
  std::size_t distractor_vocab = 16;
  std::size_t query_length = 6;  // tokens after the class token
  double distractor_rate = 0.5;
  double min_duration = 20.0;
  double max_duration = 60.0;
  // Relative weight of GT length ratios in (0.1 b, 0.1 (b + 1)], b = 0..9.
  std::vector<double> length_weights{1, 2, 2, 2, 1, 0, 0, 0, 0, 0};

  std::size_t video_count() const { return train_videos + val_videos + test_videos; }
  // class token + concept tokens + distractor tokens
  std::size_t vocab_size() const {
    return 1 + concepts * tokens_per_concept + distractor_vocab;
  }
  void validate() const;
};

void to_json(nlohmann::json& j, const GenParams& p);
void from_json(const nlohmann::json& j, GenParams& p);

struct Query {
  std::vector<std::size_t> tokens;
  std::size_t start = 0;  // raw clip indices, inclusive
  std::size_t end = 0;
  std::size_t concept_id = 0;
};

struct Video {
  std::string id;
  std::string split;
  double duration = 0.0;
  Tensor features;  // [l, d] raw clip rows
  std::vector<Query> queries;

  std::size_t raw_clips() const { return features.dim(0); }
  momentmap::TimeSpan gt_time(const Query& q) const;
};

struct Corpus {
  std::vector<Video> videos;
  std::size_t vocab_size = 0;
  std::size_t feature_dim = 0;
  std::size_t concepts = 0;

  std::size_t query_count() const;
  // Videos of one split ("train", "val", "test"); "all" keeps everything.
  Corpus split(const std::string& name) const;
};

// On-disk index. Feature blocks are little-endian f32, row-major, in
// manifest order.
struct CorpusManifest {
  struct VideoEntry {
    std::string id;
    std::string split;
    double duration = 0.0;
    std::size_t raw_clips = 0;
    std::size_t offset = 0;  // bytes into features.bin
    std::size_t length = 0;  // bytes
  };
  struct QueryEntry {
    std::string video;
    std::vector<std::size_t> tokens;
    std::size_t start = 0;
    std::size_t end = 0;
    std::size_t concept_id = 0;
  };
  GenParams params;
  std::uint64_t seed = 0;
  std::size_t feature_dim = 0;
  std::size_t vocab_size = 0;
  std::vector<VideoEntry> videos;
  std::vector<QueryEntry> queries;
};

void to_json(nlohmann::json& j, const CorpusManifest& m);
void from_json(const nlohmann::json& j, CorpusManifest& m);

inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kFeatureFile = "features.bin";

// In-memory generation; the corpus holds f32-rounded features, identical
// to what load_corpus returns for the written files.
Corpus generate(const GenParams& params, std::uint64_t seed,
                CorpusManifest* manifest = nullptr);
CorpusManifest generate_corpus(const GenParams& params, std::uint64_t seed,
                               const std::filesystem::path& out_dir);

Corpus load_corpus(const std::filesystem::path& dir);
// Every invariant violation found; empty iff load_corpus succeeds.
std::vector<std::string> verify_manifest(const std::filesystem::path& dir);

// Length-ratio bin of a GT span relative to the video: (0.1 b, 0.1 (b + 1)].
std::size_t length_bin(double ratio);

}  // namespace mmn::synthdata

#endif  // MMN_SYNTHDATA_HPP_
