#ifndef MCLAB_CORPUS_HPP
#define MCLAB_CORPUS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "mclab/common.hpp"
#include "mclab/opcodes.hpp"
#include "mclab/rng.hpp"

namespace mclab {

struct SampleRecord {
  std::string id;        // unique within a manifest
  std::string family;    // drawn from the manifest's label set
  std::string relpath;   // binary location relative to corpus root
  std::uint64_t byte_length = 0;
  std::uint64_t opcode_count = 0;  // 0 when no listing exists
};

struct Manifest {
  std::vector<std::string> label_set;  // sorted, duplicate-free
  std::vector<SampleRecord> records;   // sorted by (family, relpath)
  std::uint64_t seed = 0;

  int label_index(const std::string& family) const {
    auto it = std::lower_bound(label_set.begin(), label_set.end(), family);
    if (it == label_set.end() || *it != family)
      throw DataError("family not in label set: " + family);
    return static_cast<int>(it - label_set.begin());
  }
};

struct IngestResult {
  Manifest manifest;
  int skipped = 0;                    // unreadable entries
  std::vector<std::string> skipped_paths;
};

struct SplitAssignment {
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;
};

struct SyntheticFamilySpec {
  std::string family;
  // 256x256 row-stochastic byte transition table, row-major
  std::vector<double> byte_markov;
  // opcode bigram weights: next-token distribution per previous token
  std::vector<std::string> mnemonics;
  std::vector<std::vector<double>> opcode_bigrams;  // [prev][next]
  // tokens past this index sample uniformly instead of from the family
  // grammar, so the class signal sits early in each listing and sequence
  // models must carry it across a long indifferent suffix (0 = whole listing
  // uses the family grammar)
  int signature_prefix = 0;
  std::uint64_t min_bytes = 4096;
  std::uint64_t max_bytes = 16384;
  int samples = 300;
};

// ---------------------------------------------------------------------------
// Manifest persistence: JSON Lines, header object first.

inline void write_manifest(const fs::path& path, const Manifest& m) {
  std::string text;
  nlohmann::json header{{"labels", m.label_set}, {"seed", m.seed}};
  text += header.dump();
  text += '\n';
  for (const auto& r : m.records) {
    nlohmann::json line{{"id", r.id},
                        {"family", r.family},
                        {"relpath", r.relpath},
                        {"bytes", r.byte_length},
                        {"opcodes", r.opcode_count}};
    text += line.dump();
    text += '\n';
  }
  write_file_text(path, text);
}

inline Manifest read_manifest(const fs::path& path) {
  const std::string text = read_file_text(path);
  Manifest m;
  std::size_t pos = 0;
  bool saw_header = false;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    const std::string line = text.substr(pos, eol - pos);
    pos = eol + 1;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw DataError("malformed manifest line in " + path.string());
    if (!saw_header) {
      m.label_set = j.at("labels").get<std::vector<std::string>>();
      m.seed = j.at("seed").get<std::uint64_t>();
      saw_header = true;
      continue;
    }
    SampleRecord r;
    r.id = j.at("id").get<std::string>();
    r.family = j.at("family").get<std::string>();
    r.relpath = j.at("relpath").get<std::string>();
    r.byte_length = j.at("bytes").get<std::uint64_t>();
    r.opcode_count = j.at("opcodes").get<std::uint64_t>();
    m.records.push_back(std::move(r));
  }
  if (!saw_header) throw DataError("manifest missing header line: " + path.string());
  return m;
}

inline void write_split(const fs::path& path, const SplitAssignment& s) {
  nlohmann::json j{{"train", s.train_ids},
                   {"test", s.test_ids},
                   {"fraction", s.test_fraction},
                   {"seed", s.seed}};
  write_file_text(path, j.dump(2) + "\n");
}

inline SplitAssignment read_split(const fs::path& path) {
  nlohmann::json j = nlohmann::json::parse(read_file_text(path));
  SplitAssignment s;
  s.train_ids = j.at("train").get<std::vector<std::string>>();
  s.test_ids = j.at("test").get<std::vector<std::string>>();
  s.test_fraction = j.at("fraction").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

// ---------------------------------------------------------------------------
// Ingestion

namespace detail {

inline std::string sample_id_for(const std::string& family, const fs::path& file) {
  return family + "/" + file.stem().string();
}

}  // namespace detail

/// Scans one subdirectory per family, in lexicographic order, producing one
/// record per binary. A sibling "<name>.asm" listing fills opcode_count.
/// Unreadable entries are skipped and reported; an unreadable root is fatal.
inline IngestResult ingest_directory(const fs::path& root) {
  std::error_code ec;
  if (!fs::is_directory(root, ec) || ec)
    throw DataError("corpus root is not a readable directory: " + root.string());

  IngestResult result;
  std::vector<fs::path> family_dirs;
  for (const auto& entry : fs::directory_iterator(root, ec)) {
    if (entry.is_directory()) family_dirs.push_back(entry.path());
  }
  if (ec) throw DataError("cannot scan corpus root: " + root.string());
  std::sort(family_dirs.begin(), family_dirs.end());

  for (const auto& dir : family_dirs) {
    const std::string family = dir.filename().string();
    result.manifest.label_set.push_back(family);

    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) files.push_back(entry.path());
    std::sort(files.begin(), files.end());

    for (const auto& file : files) {
      if (file.extension() == ".asm" || file.extension() == ".ops") continue;
      std::error_code fec;
      if (fs::is_directory(file, fec)) continue;
      const auto size = fs::file_size(file, fec);
      if (fec || !fs::is_regular_file(file, fec) || fec) {
        ++result.skipped;
        result.skipped_paths.push_back(file.string());
        continue;
      }
      SampleRecord rec;
      rec.family = family;
      rec.relpath = family + "/" + file.filename().string();
      rec.id = detail::sample_id_for(family, file);
      rec.byte_length = size;

      const fs::path listing = fs::path(file).replace_extension(".asm");
      if (fs::exists(listing, fec) && !fec) {
        try {
          rec.opcode_count = parse_listing(read_file_text(listing)).sequence.mnemonics.size();
        } catch (const DataError&) {
          ++result.skipped;
          result.skipped_paths.push_back(listing.string());
        }
      }
      result.manifest.records.push_back(std::move(rec));
    }
  }
  std::sort(result.manifest.records.begin(), result.manifest.records.end(),
            [](const SampleRecord& a, const SampleRecord& b) {
              return std::tie(a.family, a.relpath) < std::tie(b.family, b.relpath);
            });
  std::unordered_set<std::string> seen;
  for (const auto& r : result.manifest.records)
    if (!seen.insert(r.id).second)
      throw DataError("duplicate sample id: " + r.id);
  return result;
}

// ---------------------------------------------------------------------------
// Stratified splitting

/// Deterministic stratified train/test partition. Each family contributes
/// clamp(round(n * fraction), 1, n-1) test samples, which stays within one
/// sample of the exact proportion.
inline SplitAssignment stratified_split(const Manifest& manifest, double test_fraction,
                                        std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw DataError(strf("test fraction %g outside (0,1)", test_fraction));

  std::map<std::string, std::vector<std::string>> by_family;
  for (const auto& r : manifest.records) by_family[r.family].push_back(r.id);

  for (const auto& [family, ids] : by_family)
    if (ids.size() < 2)
      throw DataError(strf("family '%s' has %zu sample(s); need at least 2 to split",
                           family.c_str(), ids.size()));

  SplitAssignment split;
  split.test_fraction = test_fraction;
  split.seed = seed;
  for (auto& [family, ids] : by_family) {
    Rng rng(mix_seed({seed, hash_str(family)}));
    rng.shuffle(ids);
    const auto n = static_cast<std::int64_t>(ids.size());
    std::int64_t n_test = std::llround(static_cast<double>(n) * test_fraction);
    n_test = std::clamp<std::int64_t>(n_test, 1, n - 1);
    for (std::int64_t i = 0; i < n; ++i)
      (i < n_test ? split.test_ids : split.train_ids).push_back(ids[i]);
  }
  std::sort(split.train_ids.begin(), split.train_ids.end());
  std::sort(split.test_ids.begin(), split.test_ids.end());
  return split;
}

// ---------------------------------------------------------------------------
// Synthetic corpus generation

namespace detail {

inline std::vector<double> cumulative(const std::vector<double>& weights) {
  std::vector<double> cum(weights.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    cum[i] = acc;
  }
  return cum;
}

inline std::size_t sample_cumulative(const std::vector<double>& cum, Rng& rng) {
  const double u = rng.next_double() * cum.back();
  auto it = std::upper_bound(cum.begin(), cum.end(), u);
  if (it == cum.end()) --it;
  return static_cast<std::size_t>(it - cum.begin());
}

// Plausible AT&T operand text per mnemonic so listings look like objdump output.
inline std::string synth_operands(const std::string& mnemonic, Rng& rng) {
  static const char* kRegs[] = {"%eax", "%ebx", "%ecx", "%edx", "%esi", "%edi", "%ebp", "%esp"};
  if (mnemonic == "ret" || mnemonic == "nop" || mnemonic == "leave" || mnemonic == "cdq")
    return "";
  if (mnemonic == "push" || mnemonic == "pop" || mnemonic == "inc" || mnemonic == "dec" ||
      mnemonic == "not" || mnemonic == "neg")
    return std::string(kRegs[rng.next_below(8)]);
  if (mnemonic == "call" || mnemonic[0] == 'j')
    return strf("%x <sub_%x>", 0x401000u + static_cast<unsigned>(rng.next_below(0xffff)),
                static_cast<unsigned>(rng.next_below(0xffff)));
  if (mnemonic == "int")
    return strf("$0x%x", static_cast<unsigned>(rng.next_below(0x100)));
  const std::string a = kRegs[rng.next_below(8)];
  const std::string b = kRegs[rng.next_below(8)];
  switch (rng.next_below(3)) {
    case 0: return a + "," + b;
    case 1: return strf("$0x%x,", static_cast<unsigned>(rng.next_below(0x10000))) + b;
    default: return strf("0x%x(", static_cast<unsigned>(rng.next_below(0x100))) + a + ")," + b;
  }
}

}  // namespace detail

inline void validate_spec(const SyntheticFamilySpec& spec) {
  if (spec.byte_markov.size() != 256 * 256)
    throw DataError("byte_markov must be 256x256 for family " + spec.family);
  for (int r = 0; r < 256; ++r) {
    double sum = 0.0;
    for (int c = 0; c < 256; ++c) sum += spec.byte_markov[r * 256 + c];
    if (std::abs(sum - 1.0) > 1e-6)
      throw DataError(strf("byte_markov row %d of family %s sums to %.9f, not 1",
                           r, spec.family.c_str(), sum));
  }
  if (spec.min_bytes > spec.max_bytes)
    throw DataError("length range inverted for family " + spec.family);
  if (spec.samples <= 0) throw DataError("samples must be positive for family " + spec.family);
  if (spec.mnemonics.empty() || spec.opcode_bigrams.size() != spec.mnemonics.size())
    throw DataError("opcode grammar malformed for family " + spec.family);
}

/// Writes one binary (byte stream from the Markov table) and one disassembly
/// listing (token stream from the bigram grammar) per sample. Output trees are
/// byte-identical across runs and platforms for fixed specs and seed.
inline Manifest synthesize_corpus(const std::vector<SyntheticFamilySpec>& specs,
                                  const fs::path& root, std::uint64_t seed) {
  if (specs.empty()) throw DataError("synthesize_corpus: no family specs");
  {
    std::set<std::string> names;
    for (const auto& s : specs) {
      validate_spec(s);
      if (!names.insert(s.family).second)
        throw DataError("duplicate family name: " + s.family);
    }
  }
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec || !fs::is_directory(root))
    throw DataError("cannot create corpus root: " + root.string());

  Manifest manifest;
  manifest.seed = seed;
  for (const auto& spec : specs) manifest.label_set.push_back(spec.family);
  std::sort(manifest.label_set.begin(), manifest.label_set.end());

  for (std::size_t f = 0; f < specs.size(); ++f) {
    const auto& spec = specs[f];
    const fs::path dir = root / spec.family;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create family directory: " + dir.string());

    // Per-row cumulative tables once per family.
    std::vector<std::vector<double>> byte_cum(256);
    for (int r = 0; r < 256; ++r)
      byte_cum[r] = detail::cumulative(std::vector<double>(
          spec.byte_markov.begin() + r * 256, spec.byte_markov.begin() + (r + 1) * 256));
    std::vector<std::vector<double>> gram_cum(spec.mnemonics.size());
    for (std::size_t i = 0; i < spec.mnemonics.size(); ++i)
      gram_cum[i] = detail::cumulative(spec.opcode_bigrams[i]);
    const std::vector<double> neutral_cum =
        detail::cumulative(std::vector<double>(spec.mnemonics.size(), 1.0));

    for (int s = 0; s < spec.samples; ++s) {
      Rng rng(mix_seed({seed, hash_str(spec.family), static_cast<std::uint64_t>(s)}));
      const std::uint64_t length =
          spec.min_bytes +
          rng.next_below(spec.max_bytes - spec.min_bytes + 1);

      std::vector<std::uint8_t> bytes(length);
      std::uint8_t state = static_cast<std::uint8_t>(rng.next_below(256));
      for (int burn = 0; burn < 48; ++burn)  // reach the stationary regime
        state = static_cast<std::uint8_t>(detail::sample_cumulative(byte_cum[state], rng));
      bytes[0] = state;
      for (std::uint64_t i = 1; i < length; ++i) {
        state = static_cast<std::uint8_t>(detail::sample_cumulative(byte_cum[state], rng));
        bytes[i] = state;
      }

      const std::string stem = strf("%s_%04d", spec.family.c_str(), s);
      write_file_bytes(dir / (stem + ".bin"), bytes.data(), bytes.size());

      // Listings carry at least 512 opcodes so a 500-token encode window is
      // fully live for every sample.
      const std::uint64_t opcode_count = std::max<std::uint64_t>(512, length / 16);
      std::string listing = strf("%s:     file format elf32-i386\n\n\n"
                                 "Disassembly of section .text:\n\n"
                                 "08048000 <%s>:\n",
                                 (stem + ".bin").c_str(), stem.c_str());
      std::size_t tok = detail::sample_cumulative(gram_cum[0], rng);
      unsigned addr = 0x8048000;
      for (std::uint64_t i = 0; i < opcode_count; ++i) {
        const std::string& mnemonic = spec.mnemonics[tok];
        const unsigned ilen = 1 + static_cast<unsigned>(rng.next_below(4));
        std::string bytes_col;
        for (unsigned bb = 0; bb < ilen; ++bb) {
          if (bb) bytes_col += ' ';
          bytes_col += strf("%02x", static_cast<unsigned>(rng.next_below(256)));
        }
        const std::string operands = detail::synth_operands(mnemonic, rng);
        listing += strf(" %x:\t%s\t%s", addr, bytes_col.c_str(), mnemonic.c_str());
        if (!operands.empty()) listing += "    " + operands;
        listing += '\n';
        addr += ilen;
        const bool in_prefix =
            spec.signature_prefix <= 0 ||
            i + 1 < static_cast<std::uint64_t>(spec.signature_prefix);
        tok = detail::sample_cumulative(in_prefix ? gram_cum[tok] : neutral_cum, rng);
      }
      write_file_text(dir / (stem + ".asm"), listing);

      SampleRecord rec;
      rec.family = spec.family;
      rec.relpath = spec.family + "/" + stem + ".bin";
      rec.id = spec.family + "/" + stem;
      rec.byte_length = length;
      rec.opcode_count = opcode_count;
      manifest.records.push_back(std::move(rec));
    }
  }
  std::sort(manifest.records.begin(), manifest.records.end(),
            [](const SampleRecord& a, const SampleRecord& b) {
              return std::tie(a.family, a.relpath) < std::tie(b.family, b.relpath);
            });
  return manifest;
}

/// Built-in family specs with engineered separability: byte distributions at
/// least 0.15 apart in total variation (so image models can learn) and
/// family-specific opcode signatures (so sequence models can learn).
inline std::vector<SyntheticFamilySpec> default_family_specs(int families, int samples,
                                                             std::uint64_t seed,
                                                             std::uint64_t min_bytes = 4096,
                                                             std::uint64_t max_bytes = 16384) {
  if (families <= 0) throw DataError("need at least one family");
  static const std::vector<std::string> kMnemonics = {
      "mov",  "push", "pop",  "call", "ret",  "add", "sub",  "xor",
      "cmp",  "test", "jmp",  "je",   "jne",  "lea", "and",  "or",
      "inc",  "dec",  "shl",  "shr",  "nop",  "imul", "movzx", "int"};

  // Each family owns a disjoint intensity band (band order shuffled by seed),
  // so 85% of its byte mass sits in one coarse pixel range: families differ
  // in first-order image statistics and the pairwise stationary TV distance
  // is 0.85, far above the 0.15 floor.
  const int band_width = std::max(1, 256 / families);
  std::vector<int> band_order(families);
  for (int i = 0; i < families; ++i) band_order[i] = i;
  {
    Rng band_rng(mix_seed({seed, 0x42595445ull}));
    band_rng.shuffle(band_order);
  }

  std::vector<SyntheticFamilySpec> specs;
  for (int f = 0; f < families; ++f) {
    SyntheticFamilySpec spec;
    spec.family = strf("fam%02d", f);
    spec.samples = samples;
    spec.min_bytes = min_bytes;
    spec.max_bytes = max_bytes;
    spec.mnemonics = kMnemonics;

    // Palette: a few values spread across the family's band. Rows mix a
    // self-transition with a palette resample: short runs give the images
    // texture, and the chain's stationary distribution is exactly the
    // palette distribution (pi = 0.7*pi + 0.3*p has the fixed point pi = p).
    const int band_start = (band_order[f] % families) * band_width;
    const int palette_size = std::clamp(band_width / 8, 1, 6);
    std::vector<double> palette(256, 0.15 / 256.0);
    for (int i = 0; i < palette_size; ++i) {
      const int value =
          std::min(255, band_start + (2 * i + 1) * band_width / (2 * palette_size));
      palette[value] += 0.85 / palette_size;
    }
    spec.byte_markov.resize(256 * 256);
    for (int r = 0; r < 256; ++r) {
      double* row_out = spec.byte_markov.data() + static_cast<std::size_t>(r) * 256;
      for (int c = 0; c < 256; ++c) row_out[c] = 0.3 * palette[c];
      row_out[r] += 0.7;
    }

    // Six signature mnemonics per family get a 3x bigram boost: per-token
    // evidence is deliberately weak, so classifying a sequence takes
    // integration over a long window rather than a glance at a few tokens.
    Rng gram_rng(mix_seed({seed, 0x4f50434full, static_cast<std::uint64_t>(f)}));
    std::vector<int> mn_order(kMnemonics.size());
    for (std::size_t i = 0; i < mn_order.size(); ++i) mn_order[i] = static_cast<int>(i);
    gram_rng.shuffle(mn_order);
    std::vector<bool> is_signature(kMnemonics.size(), false);
    for (int i = 0; i < 6; ++i) is_signature[mn_order[i]] = true;
    spec.opcode_bigrams.assign(kMnemonics.size(),
                               std::vector<double>(kMnemonics.size(), 1.0));
    for (std::size_t prev = 0; prev < kMnemonics.size(); ++prev)
      for (std::size_t next = 0; next < kMnemonics.size(); ++next)
        if (is_signature[next]) spec.opcode_bigrams[prev][next] = 3.0;

    specs.push_back(std::move(spec));
  }
  return specs;
}

/// Stationary byte distribution of a family's transition table (power
/// iteration from uniform; deterministic).
inline std::vector<double> stationary_byte_distribution(const SyntheticFamilySpec& spec) {
  std::vector<double> pi(256, 1.0 / 256.0), next(256);
  for (int iter = 0; iter < 600; ++iter) {
    std::fill(next.begin(), next.end(), 0.0);
    for (int r = 0; r < 256; ++r) {
      const double w = pi[r];
      const double* row = spec.byte_markov.data() + static_cast<std::size_t>(r) * 256;
      for (int c = 0; c < 256; ++c) next[c] += w * row[c];
    }
    double delta = 0.0;
    for (int c = 0; c < 256; ++c) delta += std::abs(next[c] - pi[c]);
    pi.swap(next);
    if (delta < 1e-13) break;
  }
  return pi;
}

/// Total variation distance between the stationary byte distributions of two
/// family specs.
inline double byte_distribution_tv(const SyntheticFamilySpec& a, const SyntheticFamilySpec& b) {
  const auto pa = stationary_byte_distribution(a);
  const auto pb = stationary_byte_distribution(b);
  double tv = 0.0;
  for (int i = 0; i < 256; ++i) tv += std::abs(pa[i] - pb[i]);
  return tv / 2.0;
}

}  // namespace mclab

#endif  // MCLAB_CORPUS_HPP
