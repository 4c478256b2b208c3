#ifndef MMN_NEGATIVES_HPP_
#define MMN_NEGATIVES_HPP_

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mmn/momentmap.hpp"
#include "mmn/synthdata.hpp"

namespace mmn::negatives {

using momentmap::Interval;
using momentmap::TimeSpan;
using momentmap::ValidMask;

struct BatchVideo {
  std::size_t corpus_index = 0;
  const synthdata::Video* video = nullptr;
  momentmap::ClipFeatures clips;  // [N, d]
};

// One (video, query, GT) triple; `cell` is the GT snapped to the grid.
struct Anchor {
  std::size_t video = 0;  // index into Batch::videos
  std::size_t query = 0;  // index into that video's queries
  TimeSpan gt;
  Interval cell;
  std::size_t cell_pos = 0;  // position of `cell` in mask.cells()
};

// B whole videos with all of their queries. Anchors of one video are
// contiguous and ordered by query index.
struct Batch {
  ValidMask mask;
  std::vector<BatchVideo> videos;
  std::vector<Anchor> anchors;
  std::vector<std::size_t> first_anchor;  // per video

  std::size_t anchors_of(std::size_t video) const;
};

enum class Subsample { kNone, kMatchIntra };

struct NegativeConfig {
  bool moment_intra = true;
  bool moment_inter = true;
  bool sent_intra = true;
  bool sent_inter = true;
  double moment_iou = 0.5;    // intra moments need IoU < this with the GT
  double sentence_iou = 0.5;  // intra sentences need GT IoU < this
  std::size_t cap = 0;        // per family; 0 = no cap
  Subsample subsample = Subsample::kNone;

  bool any_enabled() const { return moment_intra || moment_inter || sent_intra || sent_inter; }
  void validate() const;
};

struct NegativeMoment {
  std::size_t video;     // batch video index
  std::size_t cell_pos;  // position in mask.cells()
  bool inter;
  friend bool operator==(const NegativeMoment&, const NegativeMoment&) = default;
};

struct NegativeSentence {
  std::size_t anchor;  // batch anchor index
  std::size_t video;
  std::size_t query;
  bool inter;
  friend bool operator==(const NegativeSentence&, const NegativeSentence&) = default;
};

// Negatives of one anchor: moments contrasted against its sentence, and
// sentences contrasted against its GT moment.
struct NegativeSets {
  std::vector<NegativeMoment> moments;
  std::vector<NegativeSentence> sentences;

  std::size_t intra_moments() const;
  std::size_t intra_sentences() const;
  bool empty() const { return moments.empty() && sentences.empty(); }
};

// Video order of each batch in one epoch: a seeded shuffle cut into
// consecutive groups of B (the last group may be shorter).
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t corpus_size, std::size_t batch_size,
                                                    std::uint64_t seed, std::size_t epoch);

Batch assemble_batch(const synthdata::Corpus& corpus, std::span<const std::size_t> video_indices,
                     const momentmap::GridConfig& grid);
// First batch of epoch 0 for `seed`.
Batch assemble_batch(const synthdata::Corpus& corpus, std::size_t batch_size, std::uint64_t seed,
                     const momentmap::GridConfig& grid);

NegativeSets build_negative_sets(const Batch& batch, std::size_t anchor, const NegativeConfig& cfg,
                                 std::uint64_t seed);

// Per family, a uniform draw from the whole set of the size of its intra
// part; order within the set is preserved.
NegativeSets subsample_to_intra_count(const NegativeSets& sets, std::uint64_t seed);

// Invariant violations of a built set (empty when sound).
std::vector<std::string> audit_negative_sets(const Batch& batch, std::size_t anchor,
                                             const NegativeSets& sets, const NegativeConfig& cfg);

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace mmn::negatives

#endif  // MMN_NEGATIVES_HPP_
