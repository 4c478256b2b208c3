#include "mmn/synthdata.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "mmn/error.hpp"

namespace mmn::synthdata {

namespace fs = std::filesystem;

void GenParams::validate() const {
  if (events_per_video < 1) throw InvalidArgument("generator: events_per_video must be >= 1");
  if (concepts < events_per_video) {
    throw InvalidArgument("generator: concepts must be >= events_per_video");
  }
  if (noise < 0.0) throw InvalidArgument("generator: noise must be >= 0");
  if (raw_clips < 1 || feature_dim < 1 || sampled_clips < 1) {
    throw InvalidArgument("generator: raw_clips, sampled_clips and feature_dim must be >= 1");
  }
  if (tokens_per_concept < 1 || query_length < 1) {
    throw InvalidArgument("generator: tokens_per_concept and query_length must be >= 1");
  }
  if (distractor_rate < 0.0 || distractor_rate > 1.0) {
    throw InvalidArgument("generator: distractor_rate must lie in [0, 1]");
  }
  if (distractor_rate > 0.0 && distractor_vocab == 0) {
    throw InvalidArgument("generator: distractor_rate > 0 needs distractor_vocab > 0");
  }
  if (!(min_duration > 0.0) || max_duration < min_duration) {
    throw InvalidArgument("generator: need 0 < min_duration <= max_duration");
  }
  if (length_weights.size() != kLengthBins) {
    throw InvalidArgument("generator: length_weights needs 10 entries");
  }
  double total = 0.0;
  for (std::size_t b = 0; b < kLengthBins; ++b) {
    if (length_weights[b] < 0.0) throw InvalidArgument("generator: negative length weight");
    // bins with no integer length at this l are unusable
    const std::size_t lo = b * raw_clips / 10 + 1, hi = (b + 1) * raw_clips / 10;
    if (lo <= hi) total += length_weights[b];
  }
  if (!(total > 0.0)) {
    throw InvalidArgument("generator: length_weights select no attainable length");
  }
}

void to_json(nlohmann::json& j, const GenParams& p) {
  j = {{"train_videos", p.train_videos},
       {"val_videos", p.val_videos},
       {"test_videos", p.test_videos},
       {"raw_clips", p.raw_clips},
       {"sampled_clips", p.sampled_clips},
       {"feature_dim", p.feature_dim},
       {"concepts", p.concepts},
       {"events_per_video", p.events_per_video},
       {"noise", p.noise},
       {"tokens_per_concept", p.tokens_per_concept},
       {"distractor_vocab", p.distractor_vocab},
       {"query_length", p.query_length},
       {"distractor_rate", p.distractor_rate},
       {"min_duration", p.min_duration},
       {"max_duration", p.max_duration},
       {"length_weights", p.length_weights}};
}

void from_json(const nlohmann::json& j, GenParams& p) {
  p.train_videos = j.at("train_videos");
  p.val_videos = j.at("val_videos");
  p.test_videos = j.at("test_videos");
  p.raw_clips = j.at("raw_clips");
  p.sampled_clips = j.at("sampled_clips");
  p.feature_dim = j.at("feature_dim");
  p.concepts = j.at("concepts");
  p.events_per_video = j.at("events_per_video");
  p.noise = j.at("noise");
  p.tokens_per_concept = j.at("tokens_per_concept");
  p.distractor_vocab = j.at("distractor_vocab");
  p.query_length = j.at("query_length");
  p.distractor_rate = j.at("distractor_rate");
  p.min_duration = j.at("min_duration");
  p.max_duration = j.at("max_duration");
  p.length_weights = j.at("length_weights").get<std::vector<double>>();
}

void to_json(nlohmann::json& j, const CorpusManifest& m) {
  nlohmann::json videos = nlohmann::json::array();
  for (const auto& v : m.videos) {
    videos.push_back({{"id", v.id},
                      {"split", v.split},
                      {"duration", v.duration},
                      {"raw_clips", v.raw_clips},
                      {"offset", v.offset},
                      {"length", v.length}});
  }
  nlohmann::json queries = nlohmann::json::array();
  for (const auto& q : m.queries) {
    queries.push_back({{"video", q.video},
                       {"tokens", q.tokens},
                       {"start", q.start},
                       {"end", q.end},
                       {"concept", q.concept_id}});
  }
  j = {{"format", "mmn-corpus"},
       {"version", 1},
       {"params", m.params},
       {"seed", m.seed},
       {"feature_dim", m.feature_dim},
       {"vocab_size", m.vocab_size},
       {"videos", videos},
       {"queries", queries}};
}

void from_json(const nlohmann::json& j, CorpusManifest& m) {
  m.params = j.at("params").get<GenParams>();
  m.seed = j.at("seed");
  m.feature_dim = j.at("feature_dim");
  m.vocab_size = j.at("vocab_size");
  m.videos.clear();
  for (const auto& v : j.at("videos")) {
    m.videos.push_back({v.at("id"), v.at("split"), v.at("duration"),
                        v.at("raw_clips"), v.at("offset"), v.at("length")});
  }
  m.queries.clear();
  for (const auto& q : j.at("queries")) {
    m.queries.push_back({q.at("video"), q.at("tokens").get<std::vector<std::size_t>>(),
                         q.at("start"), q.at("end"), q.at("concept")});
  }
}

momentmap::TimeSpan Video::gt_time(const Query& q) const {
  const double step = duration / static_cast<double>(raw_clips());
  return {static_cast<double>(q.start) * step, static_cast<double>(q.end + 1) * step};
}

std::size_t Corpus::query_count() const {
  std::size_t n = 0;
  for (const auto& v : videos) n += v.queries.size();
  return n;
}

Corpus Corpus::split(const std::string& name) const {
  Corpus out;
  out.vocab_size = vocab_size;
  out.feature_dim = feature_dim;
  out.concepts = concepts;
  for (const auto& v : videos) {
    if (name == "all" || v.split == name) out.videos.push_back(v);
  }
  return out;
}

std::size_t length_bin(double ratio) {
  const double scaled = std::ceil(ratio * 10.0 - 1e-9);
  const long b = static_cast<long>(scaled) - 1;
  return static_cast<std::size_t>(std::clamp(b, 0L, static_cast<long>(kLengthBins) - 1));
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

struct Span {
  std::size_t start, end;
};

bool overlaps(const Span& a, const Span& b) { return a.start <= b.end && b.start <= a.end; }

}  // namespace

Corpus generate(const GenParams& params, std::uint64_t seed, CorpusManifest* manifest) {
  params.validate();
  const std::size_t l = params.raw_clips, d = params.feature_dim;

  // shared across splits: concept prototypes and concept vocabularies
  std::mt19937_64 world(splitmix64(seed));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<std::vector<double>> prototypes(params.concepts, std::vector<double>(d));
  for (auto& p : prototypes) {
    double sq = 0.0;
    for (double& v : p) {
      v = gauss(world);
      sq += v * v;
    }
    const double inv = 1.0 / std::sqrt(sq);
    for (double& v : p) v *= inv;
  }
  const std::size_t concept_base = 1;
  const std::size_t distractor_base = concept_base + params.concepts * params.tokens_per_concept;

  std::vector<std::size_t> lo(kLengthBins), hi(kLengthBins);
  std::vector<double> weights(kLengthBins);
  for (std::size_t b = 0; b < kLengthBins; ++b) {
    lo[b] = b * l / 10 + 1;
    hi[b] = (b + 1) * l / 10;
    weights[b] = lo[b] <= hi[b] ? params.length_weights[b] : 0.0;
  }

  Corpus corpus;
  corpus.vocab_size = params.vocab_size();
  corpus.feature_dim = d;
  corpus.concepts = params.concepts;
  if (manifest) {
    *manifest = CorpusManifest{};
    manifest->params = params;
    manifest->seed = seed;
    manifest->feature_dim = d;
    manifest->vocab_size = params.vocab_size();
  }

  const std::size_t total = params.video_count();
  std::size_t offset = 0;
  for (std::size_t k = 0; k < total; ++k) {
    std::mt19937_64 rng(splitmix64(seed ^ splitmix64(k + 1)));
    Video video;
    char id[32];
    std::snprintf(id, sizeof(id), "v%05zu", k);
    video.id = id;
    video.split = k < params.train_videos                       ? "train"
                  : k < params.train_videos + params.val_videos ? "val"
                                                                : "test";
    std::uniform_real_distribution<double> dur(params.min_duration, params.max_duration);
    video.duration = dur(rng);

    std::normal_distribution<double> noise(0.0, params.noise > 0.0 ? params.noise : 1.0);
    auto draw_noise = [&]() { return params.noise > 0.0 ? noise(rng) : 0.0; };
    Tensor feats(diffcore::Shape{l, d});
    for (double& v : feats.values()) v = draw_noise();

    std::vector<std::size_t> order(params.concepts);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::discrete_distribution<std::size_t> pick_bin(weights.begin(), weights.end());

    std::vector<Span> placed;
    for (std::size_t e = 0; e < params.events_per_video; ++e) {
      Span span{0, 0};
      bool ok = false;
      for (int attempt = 0; attempt < 64 && !ok; ++attempt) {
        const std::size_t b = pick_bin(rng);
        std::uniform_int_distribution<std::size_t> pick_len(lo[b], hi[b]);
        const std::size_t len = std::min(pick_len(rng), l);
        std::vector<std::size_t> free;
        for (std::size_t s = 0; s + len <= l; ++s) {
          Span cand{s, s + len - 1};
          if (std::none_of(placed.begin(), placed.end(),
                           [&](const Span& p) { return overlaps(p, cand); })) {
            free.push_back(s);
          }
        }
        if (free.empty() && attempt < 63) continue;
        std::size_t s;
        if (free.empty()) {
          std::uniform_int_distribution<std::size_t> pick_start(0, l - len);
          s = pick_start(rng);
        } else {
          std::uniform_int_distribution<std::size_t> pick(0, free.size() - 1);
          s = free[pick(rng)];
        }
        span = Span{s, s + len - 1};
        ok = true;
      }
      placed.push_back(span);

      const std::size_t concept_id = order[e];
      for (std::size_t r = span.start; r <= span.end; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
          feats.at(r, c) = prototypes[concept_id][c] + draw_noise();
        }
      }

      Query q;
      q.start = span.start;
      q.end = span.end;
      q.concept_id = concept_id;
      q.tokens.push_back(0);
      std::bernoulli_distribution is_distractor(params.distractor_rate);
      std::uniform_int_distribution<std::size_t> pick_syn(0, params.tokens_per_concept - 1);
      std::uniform_int_distribution<std::size_t> pick_dis(
          0, params.distractor_vocab > 0 ? params.distractor_vocab - 1 : 0);
      bool has_concept = false;
      for (std::size_t t = 0; t < params.query_length; ++t) {
        if (is_distractor(rng)) {
          q.tokens.push_back(distractor_base + pick_dis(rng));
        } else {
          q.tokens.push_back(concept_base + concept_id * params.tokens_per_concept +
                             pick_syn(rng));
          has_concept = true;
        }
      }
      if (!has_concept) {
        std::uniform_int_distribution<std::size_t> pos(1, params.query_length);
        q.tokens[pos(rng)] =
            concept_base + concept_id * params.tokens_per_concept + pick_syn(rng);
      }
      video.queries.push_back(std::move(q));
    }
    for (double& v : feats.values()) v = to_f32(v);
    video.features = std::move(feats);

    if (manifest) {
      const std::size_t bytes = l * d * sizeof(float);
      manifest->videos.push_back({video.id, video.split, video.duration, l, offset, bytes});
      offset += bytes;
      for (const auto& q : video.queries) {
        manifest->queries.push_back({video.id, q.tokens, q.start, q.end, q.concept_id});
      }
    }
    corpus.videos.push_back(std::move(video));
  }
  return corpus;
}

CorpusManifest generate_corpus(const GenParams& params, std::uint64_t seed,
                               const fs::path& out_dir) {
  CorpusManifest manifest;
  Corpus corpus = generate(params, seed, &manifest);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec && !fs::is_directory(out_dir)) {
    throw DataError("cannot create output directory " + out_dir.string() + ": " +
                    ec.message());
  }
  std::string bytes;
  for (const auto& v : corpus.videos) {
    for (double value : v.features.values()) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(value));
      for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
  }
  {
    std::ofstream out(out_dir / kFeatureFile, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + (out_dir / kFeatureFile).string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed: " + (out_dir / kFeatureFile).string());
  }
  {
    std::ofstream out(out_dir / kManifestFile, std::ios::trunc);
    if (!out) throw DataError("cannot write " + (out_dir / kManifestFile).string());
    out << nlohmann::json(manifest).dump(1) << '\n';
    if (!out) throw DataError("write failed: " + (out_dir / kManifestFile).string());
  }
  return manifest;
}

namespace {

struct LoadedFiles {
  CorpusManifest manifest;
  std::string features;
};

// Parses both files, appending any problem to `report`. Returns false when
// the manifest itself cannot be read.
bool read_files(const fs::path& dir, LoadedFiles& files, std::vector<std::string>& report) {
  const fs::path mpath = dir / kManifestFile;
  const fs::path fpath = dir / kFeatureFile;
  if (!fs::is_directory(dir)) {
    report.push_back("corpus directory " + dir.string() + " does not exist");
    return false;
  }
  std::ifstream min(mpath);
  if (!min) {
    report.push_back("missing " + mpath.string());
    return false;
  }
  try {
    files.manifest = nlohmann::json::parse(min).get<CorpusManifest>();
  } catch (const std::exception& e) {
    report.push_back("unreadable manifest " + mpath.string() + ": " + e.what());
    return false;
  }
  std::ifstream fin(fpath, std::ios::binary);
  if (!fin) {
    report.push_back("missing " + fpath.string());
    return false;
  }
  files.features.assign(std::istreambuf_iterator<char>(fin), std::istreambuf_iterator<char>());
  return true;
}

void check_invariants(const LoadedFiles& files, std::vector<std::string>& report) {
  const auto& m = files.manifest;
  const std::size_t file_size = files.features.size();
  std::map<std::string, std::size_t> video_index;
  std::map<std::string, std::size_t> query_count;

  for (std::size_t k = 0; k < m.videos.size(); ++k) {
    const auto& v = m.videos[k];
    if (!video_index.emplace(v.id, k).second) {
      report.push_back("video " + v.id + ": duplicate id");
    }
    if (!(v.duration > 0.0)) report.push_back("video " + v.id + ": non-positive duration");
    if (v.raw_clips == 0) report.push_back("video " + v.id + ": zero clips");
    const std::size_t expect = v.raw_clips * m.feature_dim * sizeof(float);
    if (v.length != expect) {
      report.push_back("video " + v.id + ": block length " + std::to_string(v.length) +
                       " != clips x dim x 4 = " + std::to_string(expect));
    }
    if (v.offset > file_size || v.length > file_size - v.offset) {
      report.push_back("video " + v.id + ": block [" + std::to_string(v.offset) + ", " +
                       std::to_string(v.offset + v.length) + ") exceeds features.bin size " +
                       std::to_string(file_size));
    }
  }

  std::vector<std::size_t> by_offset(m.videos.size());
  std::iota(by_offset.begin(), by_offset.end(), 0);
  std::sort(by_offset.begin(), by_offset.end(), [&](std::size_t a, std::size_t b) {
    return m.videos[a].offset < m.videos[b].offset;
  });
  for (std::size_t k = 1; k < by_offset.size(); ++k) {
    const auto& prev = m.videos[by_offset[k - 1]];
    const auto& cur = m.videos[by_offset[k]];
    if (prev.offset + prev.length > cur.offset) {
      report.push_back("videos " + prev.id + " and " + cur.id + ": overlapping offsets");
    }
  }

  for (std::size_t k = 0; k < m.queries.size(); ++k) {
    const auto& q = m.queries[k];
    const std::string tag = "query " + std::to_string(k);
    auto it = video_index.find(q.video);
    if (it == video_index.end()) {
      report.push_back(tag + ": unknown video " + q.video);
      continue;
    }
    ++query_count[q.video];
    const auto& v = m.videos[it->second];
    if (q.start > q.end || q.end >= v.raw_clips) {
      report.push_back(tag + ": GT span [" + std::to_string(q.start) + ", " +
                       std::to_string(q.end) + "] outside [0, " +
                       std::to_string(v.raw_clips) + ")");
    }
    if (q.tokens.empty() || q.tokens[0] != 0) {
      report.push_back(tag + ": tokens must start with the class token");
    }
    for (std::size_t t : q.tokens) {
      if (t >= m.vocab_size) {
        report.push_back(tag + ": token " + std::to_string(t) + " outside vocabulary");
        break;
      }
    }
    if (q.concept_id >= m.params.concepts) {
      report.push_back(tag + ": concept " + std::to_string(q.concept_id) + " out of range");
    }
  }
  for (const auto& v : m.videos) {
    if (!query_count.count(v.id)) report.push_back("video " + v.id + ": no queries");
  }
}

}  // namespace

std::vector<std::string> verify_manifest(const fs::path& dir) {
  std::vector<std::string> report;
  LoadedFiles files;
  if (read_files(dir, files, report)) check_invariants(files, report);
  return report;
}

Corpus load_corpus(const fs::path& dir) {
  std::vector<std::string> report;
  LoadedFiles files;
  if (read_files(dir, files, report)) check_invariants(files, report);
  if (!report.empty()) throw DataError(dir.string() + ": " + report.front());

  const auto& m = files.manifest;
  Corpus corpus;
  corpus.vocab_size = m.vocab_size;
  corpus.feature_dim = m.feature_dim;
  corpus.concepts = m.params.concepts;
  std::map<std::string, std::size_t> index;
  const auto* raw = reinterpret_cast<const unsigned char*>(files.features.data());
  for (const auto& entry : m.videos) {
    Video v;
    v.id = entry.id;
    v.split = entry.split;
    v.duration = entry.duration;
    Tensor feats(diffcore::Shape{entry.raw_clips, m.feature_dim});
    const unsigned char* p = raw + entry.offset;
    for (std::size_t k = 0; k < feats.size(); ++k) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[4 * k + b]) << (8 * b);
      const float f = std::bit_cast<float>(bits);
      if (!std::isfinite(f)) {
        throw DataError(dir.string() + ": video " + v.id + ": non-finite feature at byte " +
                        std::to_string(entry.offset + 4 * k));
      }
      feats[k] = static_cast<double>(f);
    }
    v.features = std::move(feats);
    index[v.id] = corpus.videos.size();
    corpus.videos.push_back(std::move(v));
  }
  for (const auto& q : m.queries) {
    corpus.videos[index.at(q.video)].queries.push_back(
        Query{q.tokens, q.start, q.end, q.concept_id});
  }
  return corpus;
}

}  // namespace mmn::synthdata
