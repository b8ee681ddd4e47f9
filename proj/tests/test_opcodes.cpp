#include <gtest/gtest.h>

#include "mclab/corpus.hpp"
#include "mclab/opcodes.hpp"
#include "testutil.hpp"

using namespace mclab;

TEST(ParseListing, SingleInstruction) {
  const auto report = parse_listing("  401000:\t55\tpush   %ebp\n");
  EXPECT_EQ(report.sequence.mnemonics, (std::vector<std::string>{"push"}));
  EXPECT_EQ(report.skipped_lines, 0);
}

TEST(ParseListing, LabelLineYieldsNothing) {
  const auto report = parse_listing("0040100a <main>:\n");
  EXPECT_TRUE(report.sequence.mnemonics.empty());
  EXPECT_EQ(report.skipped_lines, 0);
}

TEST(ParseListing, ThreeInstructionFixture) {
  const std::string fixture =
      "  401000:\t55\tpush   %ebp\n"
      "  401001:\t8b ec\tmov    %esp,%ebp\n"
      "  401003:\te8 f8 ff ff ff\tcall   401000 <main>\n";
  const auto report = parse_listing(fixture);
  EXPECT_EQ(report.sequence.mnemonics, (std::vector<std::string>{"push", "mov", "call"}));
  EXPECT_EQ(report.skipped_lines, 0);
}

TEST(ParseListing, HeadersSectionsBlanksIgnored) {
  const std::string fixture =
      "binary.bin:     file format elf32-i386\n"
      "\n"
      "Disassembly of section .text:\n"
      "\n"
      "08048000 <_start>:\n"
      " 8048000:\t31 c0\txor    %eax,%eax\n";
  const auto report = parse_listing(fixture);
  EXPECT_EQ(report.sequence.mnemonics, (std::vector<std::string>{"xor"}));
  EXPECT_EQ(report.skipped_lines, 0);
}

TEST(ParseListing, PrefixKeepsFinalMnemonic) {
  const auto rep = parse_listing("  401000:\tf3 a4\trep movsb\n");
  EXPECT_EQ(rep.sequence.mnemonics, (std::vector<std::string>{"movsb"}));
  const auto lock = parse_listing("  401000:\tf0 01 03\tlock add %eax,(%ebx)\n");
  EXPECT_EQ(lock.sequence.mnemonics, (std::vector<std::string>{"add"}));
}

TEST(ParseListing, MnemonicsLowercased) {
  const auto rep = parse_listing("  401000:\t90\tNOP\n");
  EXPECT_EQ(rep.sequence.mnemonics, (std::vector<std::string>{"nop"}));
}

TEST(ParseListing, BadDirectiveDropped) {
  const auto rep = parse_listing("  401000:\tff ff\t(bad)\n");
  EXPECT_TRUE(rep.sequence.mnemonics.empty());
  EXPECT_EQ(rep.skipped_lines, 0);
  EXPECT_EQ(rep.dropped_directives, 1);
}

TEST(ParseListing, ByteContinuationIgnored) {
  const auto rep = parse_listing("  401010:\t66 90\n");
  EXPECT_TRUE(rep.sequence.mnemonics.empty());
  EXPECT_EQ(rep.skipped_lines, 0);
}

TEST(ParseListing, MalformedInstructionLinesCounted) {
  // colon-hex prefix but unparseable body
  const std::string fixture =
      "  401000:\t55\tpush   %ebp\n"
      "  401001:\t@@ garbage @@\n"
      "  401002:\tzz zz\t????\n"
      "  401003:\t12 34\t42bad\n";
  const auto rep = parse_listing(fixture);
  EXPECT_EQ(rep.sequence.mnemonics, (std::vector<std::string>{"push"}));
  EXPECT_EQ(rep.skipped_lines, 3);
}

TEST(ParseListing, OperandsNeverLeak) {
  const std::string fixture =
      "  401000:\t8d 45 f8\tlea    -0x8(%ebp),%eax\n"
      "  401003:\tc7 04 24\tmovl   $0x8048000,(%esp)\n"
      "  40100a:\t74 0c\tje     401018 <x+0x18>\n";
  const auto rep = parse_listing(fixture);
  EXPECT_EQ(rep.sequence.mnemonics, (std::vector<std::string>{"lea", "movl", "je"}));
}

TEST(ParseListing, RoundTripOnSyntheticListing) {
  // The corpus generator writes listings; parsing one must recover the exact
  // token stream it sampled (counted via the manifest's opcode_count).
  testutil::ScopedTempDir tmp("roundtrip");
  auto specs = default_family_specs(1, 2, 17, 512, 1024);
  const Manifest manifest = synthesize_corpus(specs, tmp.path(), 17);
  ASSERT_EQ(manifest.records.size(), 2u);
  for (const auto& rec : manifest.records) {
    const auto listing = read_file_text(
        tmp.path() / fs::path(rec.relpath).replace_extension(".asm"));
    const auto report = parse_listing(listing);
    EXPECT_EQ(report.sequence.mnemonics.size(), rec.opcode_count);
    EXPECT_EQ(report.skipped_lines, 0);
    // serialize -> parse is the identity on the token stream
    write_token_file(tmp.path() / "tokens.ops", report.sequence);
    const auto back = read_token_file(tmp.path() / "tokens.ops");
    EXPECT_EQ(back.mnemonics, report.sequence.mnemonics);
  }
}

// ---------------------------------------------------------------------------
// Vocabulary

TEST(Vocabulary, FrequencyOrder) {
  OpcodeSequence seq;
  seq.mnemonics = {"mov", "mov", "push"};
  const auto vocab = build_vocabulary({seq}, 10);
  EXPECT_EQ(vocab.size(), 4);
  EXPECT_EQ(vocab.lookup("<pad>"), 0);
  EXPECT_EQ(vocab.lookup("<unk>"), 1);
  EXPECT_EQ(vocab.lookup("mov"), 2);
  EXPECT_EQ(vocab.lookup("push"), 3);
}

TEST(Vocabulary, LexicographicTieBreak) {
  OpcodeSequence seq;
  seq.mnemonics = {"mov", "add"};  // both frequency 1
  const auto vocab = build_vocabulary({seq}, 10);
  EXPECT_EQ(vocab.lookup("add"), 2);
  EXPECT_EQ(vocab.lookup("mov"), 3);
}

TEST(Vocabulary, CapKeepsTopTokens) {
  std::vector<OpcodeSequence> seqs;
  OpcodeSequence seq;
  for (int i = 0; i < 300; ++i) {
    // token t### appears (300 - i) times: rank == index
    for (int k = 0; k < 300 - i; ++k) seq.mnemonics.push_back(strf("t%03d", i));
  }
  seqs.push_back(seq);
  const auto vocab = build_vocabulary(seqs, 100);
  EXPECT_EQ(vocab.size(), 100);
  EXPECT_EQ(vocab.lookup("t000"), 2);
  EXPECT_EQ(vocab.lookup("t097"), 99);
  EXPECT_EQ(vocab.lookup("t098"), Vocabulary::kUnk);  // beyond the cap
  EXPECT_EQ(vocab.lookup("t299"), Vocabulary::kUnk);
}

TEST(Vocabulary, EmptyInputKeepsReserves) {
  const auto vocab = build_vocabulary({}, 10);
  EXPECT_EQ(vocab.size(), 2);
}

TEST(Vocabulary, RebuildIsIdentical) {
  OpcodeSequence a, b;
  a.mnemonics = {"xor", "mov", "xor", "ret"};
  b.mnemonics = {"mov", "mov", "jmp"};
  const auto v1 = build_vocabulary({a, b}, 50);
  const auto v2 = build_vocabulary({a, b}, 50);
  EXPECT_EQ(v1.id_to_token, v2.id_to_token);
}

TEST(Vocabulary, FileRoundTrip) {
  testutil::ScopedTempDir tmp("vocab");
  OpcodeSequence seq;
  seq.mnemonics = {"mov", "mov", "push", "call"};
  const auto vocab = build_vocabulary({seq}, 10);
  write_vocabulary(tmp.path() / "vocab.tsv", vocab);
  const auto back = read_vocabulary(tmp.path() / "vocab.tsv");
  EXPECT_EQ(back.id_to_token, vocab.id_to_token);
}

// ---------------------------------------------------------------------------
// Encoding

TEST(Encode, PadsShortSequences) {
  OpcodeSequence seq;
  seq.mnemonics = {"mov", "push", "call"};
  const auto vocab = build_vocabulary({seq}, 10);
  const auto enc = encode(seq, vocab, 5);
  EXPECT_EQ(enc.true_length, 3);
  EXPECT_EQ(enc.ids.size(), 5u);
  EXPECT_EQ(enc.ids[3], Vocabulary::kPad);
  EXPECT_EQ(enc.ids[4], Vocabulary::kPad);
  for (int i = 0; i < 3; ++i) EXPECT_GE(enc.ids[i], 2);
}

TEST(Encode, TruncatesLongSequences) {
  OpcodeSequence seq;
  for (int i = 0; i < 700; ++i) seq.mnemonics.push_back(i % 2 ? "mov" : "push");
  const auto vocab = build_vocabulary({seq}, 10);
  const auto enc = encode(seq, vocab, 500);
  EXPECT_EQ(enc.ids.size(), 500u);
  EXPECT_EQ(enc.true_length, 700);
  for (const auto id : enc.ids) EXPECT_GE(id, 2);  // no padding in a full row
}

TEST(Encode, UnknownTokenMapsToUnk) {
  OpcodeSequence train;
  train.mnemonics = {"mov"};
  const auto vocab = build_vocabulary({train}, 10);
  OpcodeSequence seq;
  seq.mnemonics = {"mov", "fnord", "mov"};
  const auto enc = encode(seq, vocab, 4);
  EXPECT_EQ(enc.ids[1], Vocabulary::kUnk);
}

TEST(Encode, PadNeverBeforeTrueLength) {
  OpcodeSequence seq;
  seq.mnemonics = {"a", "b", "c", "d"};
  const auto vocab = build_vocabulary({seq}, 10);
  for (const int n : {1, 2, 4, 9}) {
    const auto enc = encode(seq, vocab, n);
    EXPECT_EQ(static_cast<int>(enc.ids.size()), n);
    for (int i = 0; i < std::min(n, enc.true_length); ++i)
      EXPECT_NE(enc.ids[i], Vocabulary::kPad);
  }
}
