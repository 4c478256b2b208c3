#include "mmn/synthdata.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <random>

#include <gtest/gtest.h>

#include "mmn/error.hpp"
#include "test_util.hpp"

namespace mmn::synthdata {
namespace {

using mmn::testing::read_file;
using mmn::testing::TempDir;
namespace fs = std::filesystem;

GenParams small_params() {
  GenParams p;
  p.train_videos = 6;
  p.val_videos = 2;
  p.test_videos = 2;
  p.raw_clips = 20;
  p.feature_dim = 4;
  p.concepts = 4;
  return p;
}

TEST(SynthdataTest, NoiselessEventsEqualUnitPrototype) {
  auto p = small_params();
  p.noise = 0.0;
  p.events_per_video = 1;
  const auto corpus = generate(p, 3);
  for (const auto& v : corpus.videos) {
    ASSERT_EQ(v.queries.size(), 1u);
    const auto& q = v.queries[0];
    std::vector<double> proto(v.features.values().begin() + q.start * 4,
                              v.features.values().begin() + q.start * 4 + 4);
    double sq = 0.0;
    for (double x : proto) sq += x * x;
    EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-6);
    for (std::size_t r = 0; r < v.raw_clips(); ++r) {
      for (std::size_t c = 0; c < 4; ++c) {
        const double expect = (r >= q.start && r <= q.end) ? proto[c] : 0.0;
        EXPECT_EQ(v.features.at(r, c), expect) << v.id << " row " << r;
      }
    }
  }
}

TEST(SynthdataTest, SameSeedSameBytes) {
  TempDir a("gen"), b("gen"), c("gen");
  generate_corpus(small_params(), 9, a.path());
  generate_corpus(small_params(), 9, b.path());
  generate_corpus(small_params(), 10, c.path());
  for (const char* f : {kManifestFile, kFeatureFile}) {
    EXPECT_EQ(read_file(a / f), read_file(b / f)) << f;
  }
  EXPECT_NE(read_file(a / kFeatureFile), read_file(c / kFeatureFile));
}

TEST(SynthdataTest, LoadReproducesGeneratedCorpus) {
  TempDir dir("gen");
  generate_corpus(small_params(), 5, dir.path());
  const auto mem = generate(small_params(), 5);
  const auto disk = load_corpus(dir.path());
  ASSERT_EQ(mem.videos.size(), disk.videos.size());
  EXPECT_EQ(disk.vocab_size, small_params().vocab_size());
  for (std::size_t k = 0; k < mem.videos.size(); ++k) {
    const auto& a = mem.videos[k];
    const auto& b = disk.videos[k];
    EXPECT_EQ(a.id, b.id);
    EXPECT_EQ(a.split, b.split);
    EXPECT_EQ(a.duration, b.duration);
    ASSERT_EQ(a.features.size(), b.features.size());
    for (std::size_t i = 0; i < a.features.size(); ++i) ASSERT_EQ(a.features[i], b.features[i]);
    ASSERT_EQ(a.queries.size(), b.queries.size());
    for (std::size_t q = 0; q < a.queries.size(); ++q) {
      EXPECT_EQ(a.queries[q].tokens, b.queries[q].tokens);
      EXPECT_EQ(a.queries[q].start, b.queries[q].start);
    }
  }
  EXPECT_TRUE(verify_manifest(dir.path()).empty());
}

TEST(SynthdataTest, CorpusInvariants) {
  const auto p = small_params();
  const auto corpus = generate(p, 17);
  EXPECT_EQ(corpus.split("train").videos.size(), 6u);
  EXPECT_EQ(corpus.split("val").videos.size(), 2u);
  EXPECT_EQ(corpus.split("test").videos.size(), 2u);
  EXPECT_EQ(corpus.split("all").videos.size(), 10u);
  EXPECT_EQ(corpus.query_count(), 20u);
  const std::size_t concept_end = 1 + p.concepts * p.tokens_per_concept;
  for (const auto& v : corpus.videos) {
    ASSERT_EQ(v.queries.size(), p.events_per_video);
    EXPECT_GE(v.duration, p.min_duration);
    EXPECT_LE(v.duration, p.max_duration);
    EXPECT_NE(v.queries[0].concept_id, v.queries[1].concept_id);
    for (const auto& q : v.queries) {
      EXPECT_LE(q.start, q.end);
      EXPECT_LT(q.end, p.raw_clips);
      ASSERT_EQ(q.tokens.size(), p.query_length + 1);
      EXPECT_EQ(q.tokens[0], 0u);
      bool has_concept = false;
      for (std::size_t t = 1; t < q.tokens.size(); ++t) {
        const std::size_t id = q.tokens[t];
        EXPECT_LT(id, p.vocab_size());
        if (id < concept_end) {
          EXPECT_EQ((id - 1) / p.tokens_per_concept, q.concept_id);
          has_concept = true;
        }
      }
      EXPECT_TRUE(has_concept);
      const auto t = v.gt_time(q);
      EXPECT_NEAR(t.start, v.duration * q.start / p.raw_clips, 1e-9);
      EXPECT_NEAR(t.end, v.duration * (q.end + 1) / p.raw_clips, 1e-9);
    }
  }
}

TEST(SynthdataTest, LengthHistogramFollowsWeights) {
  auto p = small_params();
  p.train_videos = 300;
  p.raw_clips = 64;
  p.length_weights = {0, 1, 0, 3, 0, 0, 0, 0, 0, 0};
  const auto corpus = generate(p, 2);
  std::vector<std::size_t> hist(kLengthBins, 0);
  std::size_t n = 0;
  for (const auto& v : corpus.videos) {
    for (const auto& q : v.queries) {
      ++hist[length_bin(static_cast<double>(q.end - q.start + 1) / p.raw_clips)];
      ++n;
    }
  }
  for (std::size_t b : {0u, 2u, 4u, 5u, 6u, 7u, 8u, 9u}) EXPECT_EQ(hist[b], 0u) << b;
  const double frac = static_cast<double>(hist[3]) / n;
  EXPECT_NEAR(frac, 0.75, 0.06);
}

TEST(SynthdataTest, LengthBinEdges) {
  EXPECT_EQ(length_bin(0.05), 0u);
  EXPECT_EQ(length_bin(0.1), 0u);
  EXPECT_EQ(length_bin(0.1000001), 1u);
  EXPECT_EQ(length_bin(0.5), 4u);
  EXPECT_EQ(length_bin(1.0), 9u);
}

TEST(SynthdataTest, ParamsValidated) {
  auto p = small_params();
  p.concepts = 1;
  EXPECT_THROW(generate(p, 1), InvalidArgument);
  p = small_params();
  p.length_weights = {0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
  EXPECT_THROW(generate(p, 1), InvalidArgument);
  p = small_params();
  p.noise = -1;
  EXPECT_THROW(generate(p, 1), InvalidArgument);
  nlohmann::json j = small_params();
  EXPECT_EQ(j.get<GenParams>().raw_clips, 20u);
}

// Corruption helpers over a freshly generated directory.
nlohmann::json read_manifest(const fs::path& dir) {
  std::ifstream in(dir / kManifestFile);
  return nlohmann::json::parse(in);
}

void write_manifest(const fs::path& dir, const nlohmann::json& j) {
  std::ofstream(dir / kManifestFile) << j.dump();
}

using Corruption = std::function<void(const fs::path&)>;

std::vector<std::pair<std::string, Corruption>> corruptions() {
  auto edit = [](std::function<void(nlohmann::json&)> f) {
    return [f](const fs::path& dir) {
      auto j = read_manifest(dir);
      f(j);
      write_manifest(dir, j);
    };
  };
  return {
      {"truncate features",
       [](const fs::path& dir) {
         const auto bytes = read_file(dir / kFeatureFile);
         std::ofstream(dir / kFeatureFile, std::ios::binary) << bytes.substr(0, bytes.size() - 16);
       }},
      {"gt end out of range", edit([](nlohmann::json& j) { j["queries"][3]["end"] = 20; })},
      {"gt start after end", edit([](nlohmann::json& j) { j["queries"][1]["start"] = 19; j["queries"][1]["end"] = 2; })},
      {"token outside vocab", edit([](nlohmann::json& j) { j["queries"][0]["tokens"][2] = 999; })},
      {"missing class token", edit([](nlohmann::json& j) { j["queries"][5]["tokens"][0] = 4; })},
      {"duplicate id", edit([](nlohmann::json& j) { j["videos"][2]["id"] = j["videos"][3]["id"]; })},
      {"zero duration", edit([](nlohmann::json& j) { j["videos"][4]["duration"] = 0.0; })},
      {"length mismatch", edit([](nlohmann::json& j) { j["videos"][0]["length"] = 12; })},
      {"unknown video", edit([](nlohmann::json& j) { j["queries"][7]["video"] = "nope"; })},
      {"concept out of range", edit([](nlohmann::json& j) { j["queries"][2]["concept"] = 40; })},
      {"overlapping offsets", edit([](nlohmann::json& j) { j["videos"][6]["offset"] = j["videos"][5]["offset"].get<int>() + 4; })},
      {"video without queries", edit([](nlohmann::json& j) {
         auto& q = j["queries"];
         for (auto it = q.begin(); it != q.end();) it = (*it)["video"] == "v00009" ? q.erase(it) : it + 1;
       })},
      {"missing features", [](const fs::path& dir) { fs::remove(dir / kFeatureFile); }},
      {"garbled manifest", [](const fs::path& dir) { std::ofstream(dir / kManifestFile) << "{\"videos\": ["; }},
  };
}

TEST(SynthdataTest, EveryCorruptionDetected) {
  for (const auto& [name, corrupt] : corruptions()) {
    TempDir dir("corrupt");
    generate_corpus(small_params(), 4, dir.path());
    corrupt(dir.path());
    EXPECT_FALSE(verify_manifest(dir.path()).empty()) << name;
    EXPECT_THROW(load_corpus(dir.path()), DataError) << name;
  }
}

TEST(SynthdataTest, TenRandomCorruptionsDetected) {
  const auto all = corruptions();
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 10; ++trial) {
    TempDir dir("fuzz");
    generate_corpus(small_params(), 100 + trial, dir.path());
    const auto& [name, corrupt] = all[std::uniform_int_distribution<std::size_t>(0, all.size() - 1)(rng)];
    corrupt(dir.path());
    EXPECT_FALSE(verify_manifest(dir.path()).empty()) << trial << " " << name;
  }
}

TEST(SynthdataTest, OverlapReportedExactlyOnce) {
  TempDir dir("overlap");
  generate_corpus(small_params(), 4, dir.path());
  auto j = read_manifest(dir.path());
  j["videos"][1]["offset"] = j["videos"][0]["offset"];
  write_manifest(dir.path(), j);
  const auto report = verify_manifest(dir.path());
  ASSERT_EQ(report.size(), 1u);
  EXPECT_NE(report[0].find("overlapping"), std::string::npos);
}

TEST(SynthdataTest, TruncationNamesOffset) {
  TempDir dir("trunc");
  generate_corpus(small_params(), 4, dir.path());
  const auto bytes = read_file(dir / kFeatureFile);
  std::ofstream(dir / kFeatureFile, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  try {
    load_corpus(dir.path());
    FAIL() << "no error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("exceeds features.bin size"), std::string::npos) << e.what();
  }
}

TEST(SynthdataTest, NonFiniteFeatureRejected) {
  TempDir dir("nan");
  generate_corpus(small_params(), 4, dir.path());
  auto bytes = read_file(dir / kFeatureFile);
  const float nan = std::nanf("");
  std::memcpy(bytes.data() + 8, &nan, sizeof(float));
  std::ofstream(dir / kFeatureFile, std::ios::binary) << bytes;
  EXPECT_THROW(load_corpus(dir.path()), DataError);
}

}  // namespace
}  // namespace mmn::synthdata
