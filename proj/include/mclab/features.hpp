#ifndef MCLAB_FEATURES_HPP
#define MCLAB_FEATURES_HPP

#include <algorithm>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "mclab/common.hpp"
#include "mclab/corpus.hpp"
#include "mclab/imaging.hpp"
#include "mclab/models.hpp"
#include "mclab/opcodes.hpp"

namespace mclab {

/// Featurized samples ready for batching: dense rows for image models or
/// fixed-length token rows for opcode models, plus integer labels.
struct ExampleSet {
  std::vector<float> dense;  // row-major [n, feat_len]
  std::size_t feat_len = 0;
  std::vector<std::int32_t> tokens;  // row-major [n, seq_len]
  int seq_len = 0;
  std::vector<std::int32_t> labels;
  std::vector<std::string> ids;

  std::size_t size() const { return labels.size(); }
  bool token_input() const { return feat_len == 0; }
};

namespace detail {

inline std::unordered_map<std::string, const SampleRecord*> record_index(
    const Manifest& manifest) {
  std::unordered_map<std::string, const SampleRecord*> map;
  for (const auto& r : manifest.records) map[r.id] = &r;
  return map;
}

inline const SampleRecord& lookup_record(
    const std::unordered_map<std::string, const SampleRecord*>& index,
    const std::string& id) {
  auto it = index.find(id);
  if (it == index.end()) throw DataError("sample id not in manifest: " + id);
  return *it->second;
}

}  // namespace detail

/// Byte-image features for the given sample ids, in the given order.
inline ExampleSet make_image_features(const Manifest& manifest, const fs::path& root,
                                      const std::vector<std::string>& ids,
                                      const ImagingConfig& cfg) {
  const auto index = detail::record_index(manifest);
  ExampleSet set;
  set.feat_len = cfg.flat ? static_cast<std::size_t>(cfg.flat_length)
                          : static_cast<std::size_t>(cfg.image_dim) * cfg.image_dim;
  set.dense.reserve(ids.size() * set.feat_len);
  for (const auto& id : ids) {
    const auto& rec = detail::lookup_record(index, id);
    const auto bytes = read_file_bytes(root / rec.relpath);
    const GrayImage img = bytes_to_image(bytes, cfg);
    for (const std::uint8_t p : img.pixels)
      set.dense.push_back(static_cast<float>(p) / 255.0f);
    set.labels.push_back(manifest.label_index(rec.family));
    set.ids.push_back(id);
  }
  return set;
}

inline fs::path listing_path(const fs::path& root, const SampleRecord& rec) {
  return root / fs::path(rec.relpath).replace_extension(".asm");
}

/// Parses the sibling listings of the given samples into opcode sequences.
inline std::vector<OpcodeSequence> load_sequences(const Manifest& manifest,
                                                  const fs::path& root,
                                                  const std::vector<std::string>& ids) {
  const auto index = detail::record_index(manifest);
  std::vector<OpcodeSequence> seqs;
  seqs.reserve(ids.size());
  for (const auto& id : ids) {
    const auto& rec = detail::lookup_record(index, id);
    seqs.push_back(parse_listing(read_file_text(listing_path(root, rec))).sequence);
  }
  return seqs;
}

/// Drops samples whose listings have fewer than min_opcodes mnemonics.
inline std::vector<std::string> filter_min_opcodes(const Manifest& manifest,
                                                   const std::vector<std::string>& ids,
                                                   std::uint64_t min_opcodes) {
  const auto index = detail::record_index(manifest);
  std::vector<std::string> kept;
  for (const auto& id : ids)
    if (detail::lookup_record(index, id).opcode_count >= min_opcodes) kept.push_back(id);
  return kept;
}

/// Fixed-length encoded opcode features for the given samples.
inline ExampleSet make_opcode_features(const Manifest& manifest, const fs::path& root,
                                       const std::vector<std::string>& ids,
                                       const Vocabulary& vocab, int n) {
  const auto index = detail::record_index(manifest);
  ExampleSet set;
  set.seq_len = n;
  set.tokens.reserve(ids.size() * static_cast<std::size_t>(n));
  for (const auto& id : ids) {
    const auto& rec = detail::lookup_record(index, id);
    const auto seq = parse_listing(read_file_text(listing_path(root, rec))).sequence;
    const TokenizedSample enc = encode(seq, vocab, n);
    set.tokens.insert(set.tokens.end(), enc.ids.begin(), enc.ids.end());
    set.labels.push_back(manifest.label_index(rec.family));
    set.ids.push_back(id);
  }
  return set;
}

inline ExampleSet subset(const ExampleSet& set, const std::vector<std::size_t>& indices) {
  ExampleSet out;
  out.feat_len = set.feat_len;
  out.seq_len = set.seq_len;
  for (const std::size_t i : indices) {
    if (i >= set.size()) throw DataError("subset index out of range");
    if (!set.token_input())
      out.dense.insert(out.dense.end(), set.dense.begin() + i * set.feat_len,
                       set.dense.begin() + (i + 1) * set.feat_len);
    else
      out.tokens.insert(out.tokens.end(),
                        set.tokens.begin() + i * static_cast<std::size_t>(set.seq_len),
                        set.tokens.begin() + (i + 1) * static_cast<std::size_t>(set.seq_len));
    out.labels.push_back(set.labels[i]);
    out.ids.push_back(set.ids[i]);
  }
  return out;
}

template <typename T>
Batch<T> make_batch(const ExampleSet& set, const std::vector<std::size_t>& indices) {
  Batch<T> batch;
  batch.batch = static_cast<int>(indices.size());
  if (!set.token_input()) {
    std::vector<T> data;
    data.reserve(indices.size() * set.feat_len);
    for (const std::size_t i : indices)
      for (std::size_t j = 0; j < set.feat_len; ++j)
        data.push_back(static_cast<T>(set.dense[i * set.feat_len + j]));
    batch.dense = TensorBase<T>::from(
        {batch.batch, static_cast<int>(set.feat_len)}, std::move(data));
  } else {
    batch.seq_len = set.seq_len;
    batch.tokens.reserve(indices.size() * static_cast<std::size_t>(set.seq_len));
    for (const std::size_t i : indices)
      batch.tokens.insert(batch.tokens.end(),
                          set.tokens.begin() + i * static_cast<std::size_t>(set.seq_len),
                          set.tokens.begin() + (i + 1) * static_cast<std::size_t>(set.seq_len));
  }
  for (const std::size_t i : indices) batch.labels.push_back(set.labels[i]);
  return batch;
}

// ---------------------------------------------------------------------------
// On-disk feature exports (CLI surface).

/// Writes <id>_<N>.pgm per sample under out_dir, mirroring family directories.
/// Returns the number of images written.
inline int export_images(const Manifest& manifest, const fs::path& root,
                         const fs::path& out_dir, const ImagingConfig& cfg,
                         bool raw_sidecar = false) {
  int written = 0;
  for (const auto& rec : manifest.records) {
    const auto bytes = read_file_bytes(root / rec.relpath);
    const GrayImage img = bytes_to_image(bytes, cfg);
    const int dim = cfg.flat ? cfg.flat_length : cfg.image_dim;
    fs::create_directories(out_dir / rec.family);
    const fs::path out = out_dir / strf("%s_%d.pgm", rec.id.c_str(), dim);
    write_pgm(out, img);
    if (raw_sidecar)
      write_file_bytes(out_dir / strf("%s_%d.bin", rec.id.c_str(), dim),
                       img.pixels.data(), img.pixels.size());
    ++written;
  }
  return written;
}

/// Writes per-sample token files, the vocabulary, and the encoded id arrays
/// (little-endian u16 rows) with a JSON sidecar.
inline void export_opcodes(const Manifest& manifest, const fs::path& root,
                           const fs::path& out_dir,
                           const std::vector<std::string>& train_ids,
                           const std::vector<std::string>& all_ids, int n,
                           std::size_t vocab_max) {
  const auto index = detail::record_index(manifest);
  const Vocabulary vocab = build_vocabulary(load_sequences(manifest, root, train_ids),
                                            vocab_max);
  fs::create_directories(out_dir);
  write_vocabulary(out_dir / "vocab.tsv", vocab);

  std::string payload;
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& id : all_ids) {
    const auto& rec = detail::lookup_record(index, id);
    const auto seq = parse_listing(read_file_text(listing_path(root, rec))).sequence;
    fs::create_directories((out_dir / rec.family));
    write_token_file(out_dir / (id + ".ops"), seq);
    const TokenizedSample enc = encode(seq, vocab, n);
    for (const std::int32_t v : enc.ids) {
      payload.push_back(static_cast<char>(v & 0xff));
      payload.push_back(static_cast<char>((v >> 8) & 0xff));
    }
    samples.push_back({{"id", id}, {"true_length", enc.true_length}});
  }
  write_file_text(out_dir / "tokens.u16", payload);
  nlohmann::json sidecar{{"N", n}, {"vocab_path", "vocab.tsv"}, {"samples", samples}};
  write_file_text(out_dir / "tokens.json", sidecar.dump(2) + "\n");
}

}  // namespace mclab

#endif  // MCLAB_FEATURES_HPP
