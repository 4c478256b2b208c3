#include "mmn/negatives.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "mmn/error.hpp"

namespace mmn::negatives {

using momentmap::index_to_time;
using momentmap::temporal_iou;

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

void NegativeConfig::validate() const {
  if (moment_iou < 0.0 || moment_iou > 1.0 || sentence_iou < 0.0 || sentence_iou > 1.0) {
    throw InvalidArgument("negatives: IoU thresholds must lie in [0, 1]");
  }
}

std::size_t Batch::anchors_of(std::size_t video) const {
  const std::size_t end = video + 1 < first_anchor.size() ? first_anchor[video + 1] : anchors.size();
  return end - first_anchor[video];
}

std::size_t NegativeSets::intra_moments() const {
  return static_cast<std::size_t>(
      std::count_if(moments.begin(), moments.end(), [](const auto& m) { return !m.inter; }));
}

std::size_t NegativeSets::intra_sentences() const {
  return static_cast<std::size_t>(
      std::count_if(sentences.begin(), sentences.end(), [](const auto& s) { return !s.inter; }));
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t corpus_size, std::size_t batch_size,
                                                    std::uint64_t seed, std::size_t epoch) {
  if (corpus_size == 0) throw InvalidArgument("epoch_batches: empty corpus");
  if (batch_size < 1) throw InvalidArgument("epoch_batches: batch size must be >= 1");
  if (batch_size > corpus_size) {
    throw InvalidArgument("epoch_batches: batch size " + std::to_string(batch_size) +
                          " exceeds corpus size " + std::to_string(corpus_size));
  }
  std::vector<std::size_t> order(corpus_size);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, epoch));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t k = 0; k < corpus_size; k += batch_size) {
    const std::size_t end = std::min(corpus_size, k + batch_size);
    batches.emplace_back(order.begin() + static_cast<long>(k), order.begin() + static_cast<long>(end));
  }
  return batches;
}

Batch assemble_batch(const synthdata::Corpus& corpus, std::span<const std::size_t> video_indices,
                     const momentmap::GridConfig& grid) {
  Batch batch;
  batch.mask = momentmap::valid_mask(grid.num_clips, grid.dense_threshold);
  for (std::size_t idx : video_indices) {
    if (idx >= corpus.videos.size()) {
      throw InvalidArgument("assemble_batch: video index " + std::to_string(idx) + " out of range");
    }
    const auto& v = corpus.videos[idx];
    const std::size_t b = batch.videos.size();
    batch.videos.push_back({idx, &v, momentmap::sample_clips(v.features, grid.num_clips, v.duration)});
    batch.first_anchor.push_back(batch.anchors.size());
    for (std::size_t q = 0; q < v.queries.size(); ++q) {
      Anchor a;
      a.video = b;
      a.query = q;
      a.gt = v.gt_time(v.queries[q]);
      a.cell = momentmap::snap_to_grid(a.gt, batch.mask, v.duration);
      a.cell_pos = batch.mask.position(a.cell.start, a.cell.end);
      batch.anchors.push_back(a);
    }
  }
  return batch;
}

Batch assemble_batch(const synthdata::Corpus& corpus, std::size_t batch_size, std::uint64_t seed,
                     const momentmap::GridConfig& grid) {
  auto batches = epoch_batches(corpus.videos.size(), batch_size, seed, 0);
  return assemble_batch(corpus, batches.front(), grid);
}

namespace {

// Seeded choice of `count` members; survivors keep their relative order.
template <typename T>
std::vector<T> choose(const std::vector<T>& items, std::size_t count, std::mt19937_64& rng) {
  if (count >= items.size()) return items;
  std::vector<std::size_t> idx(items.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t k = 0; k < count; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, idx.size() - 1);
    std::swap(idx[k], idx[pick(rng)]);
  }
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  std::vector<T> out;
  out.reserve(count);
  for (std::size_t k : idx) out.push_back(items[k]);
  return out;
}

}  // namespace

NegativeSets build_negative_sets(const Batch& batch, std::size_t anchor_index,
                                 const NegativeConfig& cfg, std::uint64_t seed) {
  if (!cfg.any_enabled()) {
    throw InvalidArgument("build_negative_sets: every negative family is disabled");
  }
  if (anchor_index >= batch.anchors.size()) {
    throw InvalidArgument("build_negative_sets: anchor " + std::to_string(anchor_index) +
                          " not in batch");
  }
  const Anchor& anchor = batch.anchors[anchor_index];
  const auto& cells = batch.mask.cells();
  const std::size_t n = batch.mask.size();
  const double duration = batch.videos[anchor.video].video->duration;

  std::vector<NegativeMoment> m_intra, m_inter;
  std::vector<NegativeSentence> s_intra, s_inter;
  if (cfg.moment_intra) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c == anchor.cell_pos) continue;
      if (temporal_iou(index_to_time(cells[c], n, duration), anchor.gt) < cfg.moment_iou) {
        m_intra.push_back({anchor.video, c, false});
      }
    }
  }
  if (cfg.moment_inter) {
    for (std::size_t v = 0; v < batch.videos.size(); ++v) {
      if (v == anchor.video) continue;
      for (std::size_t c = 0; c < cells.size(); ++c) m_inter.push_back({v, c, true});
    }
  }
  for (std::size_t a = 0; a < batch.anchors.size(); ++a) {
    if (a == anchor_index) continue;
    const Anchor& other = batch.anchors[a];
    if (other.video == anchor.video) {
      if (cfg.sent_intra && temporal_iou(other.gt, anchor.gt) < cfg.sentence_iou) {
        s_intra.push_back({a, other.video, other.query, false});
      }
    } else if (cfg.sent_inter) {
      s_inter.push_back({a, other.video, other.query, true});
    }
  }

  std::mt19937_64 rng(mix_seed(seed, anchor_index));
  if (cfg.cap > 0) {
    m_intra = choose(m_intra, cfg.cap, rng);
    m_inter = choose(m_inter, cfg.cap, rng);
    s_intra = choose(s_intra, cfg.cap, rng);
    s_inter = choose(s_inter, cfg.cap, rng);
  }
  NegativeSets sets;
  sets.moments = std::move(m_intra);
  sets.moments.insert(sets.moments.end(), m_inter.begin(), m_inter.end());
  sets.sentences = std::move(s_intra);
  sets.sentences.insert(sets.sentences.end(), s_inter.begin(), s_inter.end());
  if (cfg.subsample == Subsample::kMatchIntra) {
    sets = subsample_to_intra_count(sets, mix_seed(seed ^ 0x5bd1e995ULL, anchor_index));
  }
  return sets;
}

NegativeSets subsample_to_intra_count(const NegativeSets& sets, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  NegativeSets out;
  out.moments = choose(sets.moments, sets.intra_moments(), rng);
  out.sentences = choose(sets.sentences, sets.intra_sentences(), rng);
  return out;
}

std::vector<std::string> audit_negative_sets(const Batch& batch, std::size_t anchor_index,
                                             const NegativeSets& sets, const NegativeConfig& cfg) {
  std::vector<std::string> issues;
  const Anchor& anchor = batch.anchors[anchor_index];
  const std::size_t n = batch.mask.size();
  const double duration = batch.videos[anchor.video].video->duration;
  const std::string tag = "anchor " + std::to_string(anchor_index) + ": ";
  for (const auto& m : sets.moments) {
    if (m.video != anchor.video) continue;
    if (m.cell_pos == anchor.cell_pos) issues.push_back(tag + "positive moment among negatives");
    const double iou = temporal_iou(index_to_time(batch.mask.cells()[m.cell_pos], n, duration), anchor.gt);
    if (iou >= cfg.moment_iou) {
      issues.push_back(tag + "intra negative moment with IoU " + std::to_string(iou));
    }
  }
  for (const auto& s : sets.sentences) {
    if (s.anchor == anchor_index) issues.push_back(tag + "anchor sentence among negatives");
    if (s.video != anchor.video) continue;
    const double iou = temporal_iou(batch.anchors[s.anchor].gt, anchor.gt);
    if (iou >= cfg.sentence_iou) {
      issues.push_back(tag + "intra negative sentence with GT IoU " + std::to_string(iou));
    }
  }
  return issues;
}

}  // namespace mmn::negatives
