#ifndef MCLAB_OPCODES_HPP
#define MCLAB_OPCODES_HPP

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mclab/common.hpp"

namespace mclab {

struct OpcodeSequence {
  std::vector<std::string> mnemonics;  // appearance order, lowercased
};

struct ParseReport {
  OpcodeSequence sequence;
  int skipped_lines = 0;      // instruction-shaped lines that failed to parse
  int dropped_directives = 0; // (bad) and friends
};

struct Vocabulary {
  // ids contiguous 0..V-1 with PAD=0 and UNK=1 always present
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;
  std::unordered_map<std::string, std::int32_t> token_to_id;
  std::vector<std::string> id_to_token;  // index == id

  std::int32_t size() const { return static_cast<std::int32_t>(id_to_token.size()); }
  std::int32_t lookup(const std::string& token) const {
    auto it = token_to_id.find(token);
    return it == token_to_id.end() ? kUnk : it->second;
  }
};

struct TokenizedSample {
  std::vector<std::int32_t> ids;  // exactly N entries
  int true_length = 0;            // token count before pad/truncate
};

namespace detail {

inline bool is_hex_digit(char c) {
  return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f') || (c >= 'A' && c <= 'F');
}

inline bool is_mnemonic_char(char c) {
  return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '.' || c == '_';
}

// Instruction prefixes whose trailing mnemonic is the token we keep.
inline bool is_prefix_token(std::string_view t) {
  static const char* kPrefixes[] = {"rep",  "repe",   "repz", "repne", "repnz",
                                    "lock", "data16", "addr16", "bnd",  "notrack",
                                    "cs",   "ss",     "ds",   "es",    "fs", "gs"};
  for (const char* p : kPrefixes)
    if (t == p) return true;
  return false;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace detail

/// Extracts the mnemonic stream from a GNU-style disassembly listing.
///
/// Instruction lines look like "  401000:<tab>55 8b<tab>push   %ebp"; label
/// lines end with ">:"; header, section, and blank lines carry no hex-colon
/// prefix and are ignored. A line that has the hex-colon prefix but no
/// parseable mnemonic body counts as skipped; a bare byte-column continuation
/// line does not. Operands, addresses, and byte columns are discarded, and of
/// prefixed forms like "rep movsb" only the final mnemonic survives.
inline ParseReport parse_listing(std::string_view text) {
  ParseReport report;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t eol = text.find('\n', pos);
    std::string_view line = text.substr(pos, eol == std::string_view::npos ? text.size() - pos
                                                                           : eol - pos);
    pos = eol == std::string_view::npos ? text.size() + 1 : eol + 1;

    std::string_view body = detail::trim(line);
    if (body.empty()) continue;
    if (body.size() >= 2 && body.substr(body.size() - 2) == ">:") continue;  // label

    // Hex address followed by ':' marks an instruction-shaped line.
    std::size_t i = 0;
    while (i < body.size() && detail::is_hex_digit(body[i])) ++i;
    if (i == 0 || i >= body.size() || body[i] != ':') continue;  // header/section line
    std::string_view rest = detail::trim(body.substr(i + 1));

    // Byte column: pairs of hex digits separated by single spaces.
    std::size_t j = 0;
    int byte_pairs = 0;
    while (j + 1 < rest.size() && detail::is_hex_digit(rest[j]) &&
           detail::is_hex_digit(rest[j + 1]) &&
           (j + 2 == rest.size() || rest[j + 2] == ' ' || rest[j + 2] == '\t')) {
      ++byte_pairs;
      j += 2;
      if (j < rest.size() && rest[j] == ' ') ++j;
    }
    if (byte_pairs == 0) {
      ++report.skipped_lines;  // colon prefix but no byte column
      continue;
    }
    std::string_view tail = detail::trim(rest.substr(j));
    if (tail.empty()) continue;  // byte-column continuation of a long instruction

    // Mnemonic group: skip known prefixes, keep the final mnemonic token.
    std::string mnemonic;
    std::string_view cursor = tail;
    while (true) {
      std::size_t k = 0;
      while (k < cursor.size() && detail::is_mnemonic_char(
                                      static_cast<char>(std::tolower(cursor[k]))))
        ++k;
      if (k == 0) break;
      std::string token;
      token.reserve(k);
      for (std::size_t t = 0; t < k; ++t)
        token += static_cast<char>(std::tolower(cursor[t]));
      if (detail::is_prefix_token(token) && k < cursor.size() &&
          (cursor[k] == ' ' || cursor[k] == '\t')) {
        cursor = detail::trim(cursor.substr(k));
        continue;
      }
      mnemonic = std::move(token);
      break;
    }
    if (mnemonic.empty()) {
      if (tail.substr(0, 5) == "(bad)") {
        ++report.dropped_directives;  // data marker, not an error
      } else {
        ++report.skipped_lines;
      }
      continue;
    }
    if (mnemonic[0] == '.') {
      ++report.dropped_directives;  // assembler directive (.byte, .word, ...)
      continue;
    }
    if (!(mnemonic[0] >= 'a' && mnemonic[0] <= 'z')) {
      ++report.skipped_lines;  // mnemonics start with a letter
      continue;
    }
    report.sequence.mnemonics.push_back(std::move(mnemonic));
  }
  return report;
}

/// Frequency-ranked vocabulary from training-split sequences only. Ties break
/// lexicographically; ids 0/1 are PAD/UNK.
inline Vocabulary build_vocabulary(const std::vector<OpcodeSequence>& sequences,
                                   std::size_t max_size) {
  if (max_size < 2) throw DataError("vocabulary max_size must be at least 2");
  std::map<std::string, std::int64_t> counts;  // ordered keys give the tie-break
  for (const auto& seq : sequences)
    for (const auto& tok : seq.mnemonics) ++counts[tok];

  std::vector<std::pair<std::string, std::int64_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  Vocabulary vocab;
  vocab.id_to_token = {"<pad>", "<unk>"};
  vocab.token_to_id["<pad>"] = Vocabulary::kPad;
  vocab.token_to_id["<unk>"] = Vocabulary::kUnk;
  const std::size_t keep = std::min(ranked.size(), max_size - 2);
  for (std::size_t i = 0; i < keep; ++i) {
    vocab.token_to_id[ranked[i].first] = static_cast<std::int32_t>(vocab.id_to_token.size());
    vocab.id_to_token.push_back(ranked[i].first);
  }
  return vocab;
}

/// First n tokens mapped through the vocabulary (OOV -> UNK), PAD-suffixed.
inline TokenizedSample encode(const OpcodeSequence& seq, const Vocabulary& vocab, int n) {
  if (n <= 0) throw DataError("encode length must be positive");
  TokenizedSample out;
  out.true_length = static_cast<int>(seq.mnemonics.size());
  out.ids.assign(static_cast<std::size_t>(n), Vocabulary::kPad);
  const std::size_t limit = std::min<std::size_t>(seq.mnemonics.size(), static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < limit; ++i) out.ids[i] = vocab.lookup(seq.mnemonics[i]);
  return out;
}

/// Token file: one mnemonic per line.
inline void write_token_file(const fs::path& path, const OpcodeSequence& seq) {
  std::string text;
  for (const auto& m : seq.mnemonics) {
    text += m;
    text += '\n';
  }
  write_file_text(path, text);
}

inline OpcodeSequence read_token_file(const fs::path& path) {
  const std::string text = read_file_text(path);
  OpcodeSequence seq;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    if (eol > pos) seq.mnemonics.emplace_back(text.substr(pos, eol - pos));
    pos = eol + 1;
  }
  return seq;
}

/// Vocabulary file: "token<TAB>id" lines sorted by id.
inline void write_vocabulary(const fs::path& path, const Vocabulary& vocab) {
  std::string text;
  for (std::size_t id = 0; id < vocab.id_to_token.size(); ++id)
    text += strf("%s\t%zu\n", vocab.id_to_token[id].c_str(), id);
  write_file_text(path, text);
}

inline Vocabulary read_vocabulary(const fs::path& path) {
  const std::string text = read_file_text(path);
  Vocabulary vocab;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    const std::string line = text.substr(pos, eol - pos);
    pos = eol + 1;
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos) throw DataError("malformed vocabulary line: " + line);
    const std::string token = line.substr(0, tab);
    const std::int32_t id = std::stoi(line.substr(tab + 1));
    if (id != static_cast<std::int32_t>(vocab.id_to_token.size()))
      throw DataError("vocabulary ids must be contiguous in " + path.string());
    vocab.token_to_id[token] = id;
    vocab.id_to_token.push_back(token);
  }
  if (vocab.size() < 2 || vocab.id_to_token[0] != "<pad>" || vocab.id_to_token[1] != "<unk>")
    throw DataError("vocabulary missing PAD/UNK reserve in " + path.string());
  return vocab;
}

}  // namespace mclab

#endif  // MCLAB_OPCODES_HPP
