#include <gtest/gtest.h>

#include <map>
#include <set>

#include "mclab/corpus.hpp"
#include "testutil.hpp"

using namespace mclab;
using testutil::ScopedTempDir;

namespace {

void write_sample(const fs::path& dir, const std::string& stem, std::size_t bytes,
                  int opcodes = 0) {
  fs::create_directories(dir);
  std::vector<std::uint8_t> payload(bytes, 0xCC);
  write_file_bytes(dir / (stem + ".bin"), payload.data(), payload.size());
  if (opcodes > 0) {
    std::string listing;
    for (int i = 0; i < opcodes; ++i)
      listing += strf(" %x:\t90\tnop\n", 0x401000 + i);
    write_file_text(dir / (stem + ".asm"), listing);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// ingest

TEST(Ingest, EmptyRootGivesEmptyManifest) {
  ScopedTempDir tmp("ingest_empty");
  const auto result = ingest_directory(tmp.path());
  EXPECT_TRUE(result.manifest.records.empty());
  EXPECT_TRUE(result.manifest.label_set.empty());
  EXPECT_EQ(result.skipped, 0);
}

TEST(Ingest, MissingRootIsFatal) {
  EXPECT_THROW(ingest_directory("/nonexistent/mclab/corpus"), DataError);
}

TEST(Ingest, RecordsSortedWithOpcodeCounts) {
  ScopedTempDir tmp("ingest_sorted");
  write_sample(tmp.path() / "beta", "b1", 10, 3);
  write_sample(tmp.path() / "alpha", "a2", 20);
  write_sample(tmp.path() / "alpha", "a1", 30, 7);
  const auto result = ingest_directory(tmp.path());
  ASSERT_EQ(result.manifest.records.size(), 3u);
  EXPECT_EQ(result.manifest.label_set, (std::vector<std::string>{"alpha", "beta"}));
  EXPECT_EQ(result.manifest.records[0].id, "alpha/a1");
  EXPECT_EQ(result.manifest.records[0].byte_length, 30u);
  EXPECT_EQ(result.manifest.records[0].opcode_count, 7u);
  EXPECT_EQ(result.manifest.records[1].id, "alpha/a2");
  EXPECT_EQ(result.manifest.records[1].opcode_count, 0u);
  EXPECT_EQ(result.manifest.records[2].id, "beta/b1");
}

TEST(Ingest, UnreadableFileSkippedAndCounted) {
  ScopedTempDir tmp("ingest_skip");
  write_sample(tmp.path() / "fam", "ok1", 5);
  write_sample(tmp.path() / "fam", "ok2", 6);
  fs::create_symlink(tmp.path() / "fam" / "missing_target.bin",
                     tmp.path() / "fam" / "broken.bin");
  const auto result = ingest_directory(tmp.path());
  EXPECT_EQ(result.manifest.records.size(), 2u);
  EXPECT_EQ(result.skipped, 1);
  ASSERT_EQ(result.skipped_paths.size(), 1u);
  EXPECT_NE(result.skipped_paths[0].find("broken.bin"), std::string::npos);
}

TEST(Ingest, Table2FamilyCountsTotal26413) {
  // Family sizes from the reference dataset; the manifest total must land on
  // 26,413 binaries.
  const std::map<std::string, int> counts = {
      {"Adload", 1050},    {"Agent", 842},       {"Alureon", 1328},
      {"BHO", 1176},       {"CeeInject", 894},   {"Cycbot", 1029},
      {"DelfInject", 1146},{"Fakerean", 1063},   {"Hotbar", 1491},
      {"Lolyda", 915},     {"Obfuscator", 1445}, {"Onlinegames", 1293},
      {"Rbot", 1017},      {"Renos", 1312},      {"Startpage", 1136},
      {"Vobfus", 926},     {"Vundo", 1793},      {"Winwebsec", 3651},
      {"Zbot", 1786},      {"Zeroaccess", 1120}};
  ScopedTempDir tmp("ingest_t2");
  const std::vector<std::uint8_t> one_byte{0x90};
  for (const auto& [family, n] : counts) {
    fs::create_directories(tmp.path() / family);
    for (int i = 0; i < n; ++i)
      write_file_bytes(tmp.path() / family / strf("s%05d.bin", i), one_byte.data(), 1);
  }
  const auto result = ingest_directory(tmp.path());
  EXPECT_EQ(result.manifest.records.size(), 26413u);
  EXPECT_EQ(result.manifest.label_set.size(), 20u);
  std::map<std::string, int> by_family;
  for (const auto& r : result.manifest.records) ++by_family[r.family];
  EXPECT_EQ(by_family, counts);
}

// ---------------------------------------------------------------------------
// split

namespace {

Manifest tiny_manifest(const std::vector<std::pair<std::string, int>>& families) {
  Manifest m;
  for (const auto& [family, n] : families) {
    m.label_set.push_back(family);
    for (int i = 0; i < n; ++i) {
      SampleRecord r;
      r.family = family;
      r.id = strf("%s/s%03d", family.c_str(), i);
      r.relpath = r.id + ".bin";
      r.byte_length = 1;
      m.records.push_back(r);
    }
  }
  std::sort(m.label_set.begin(), m.label_set.end());
  return m;
}

}  // namespace

TEST(Split, ExactDivisibility) {
  const auto m = tiny_manifest({{"a", 10}, {"b", 10}, {"c", 10}});
  const auto split = stratified_split(m, 0.2, 5);
  EXPECT_EQ(split.test_ids.size(), 6u);
  EXPECT_EQ(split.train_ids.size(), 24u);
  std::map<std::string, int> per_family;
  for (const auto& id : split.test_ids) ++per_family[id.substr(0, 1)];
  for (const auto& [family, n] : per_family) EXPECT_EQ(n, 2);
}

TEST(Split, DeterministicForFixedSeed) {
  const auto m = tiny_manifest({{"a", 13}, {"b", 7}});
  const auto s1 = stratified_split(m, 0.25, 42);
  const auto s2 = stratified_split(m, 0.25, 42);
  EXPECT_EQ(s1.train_ids, s2.train_ids);
  EXPECT_EQ(s1.test_ids, s2.test_ids);
  const auto s3 = stratified_split(m, 0.25, 43);
  EXPECT_NE(s1.test_ids, s3.test_ids);  // different seed shuffles differently
}

TEST(Split, RoundingWithinOneSample) {
  const auto m = tiny_manifest({{"a", 7}});
  const auto split = stratified_split(m, 0.2, 1);
  // 7 * 0.2 = 1.4 -> test size must be 1 or 2
  EXPECT_TRUE(split.test_ids.size() == 1 || split.test_ids.size() == 2);
}

TEST(Split, IsAPartition) {
  const auto m = tiny_manifest({{"a", 11}, {"b", 4}, {"c", 29}});
  const auto split = stratified_split(m, 0.3, 9);
  std::set<std::string> train(split.train_ids.begin(), split.train_ids.end());
  std::set<std::string> test(split.test_ids.begin(), split.test_ids.end());
  EXPECT_EQ(train.size() + test.size(), m.records.size());
  for (const auto& id : test) EXPECT_EQ(train.count(id), 0u);
  std::set<std::string> all;
  for (const auto& r : m.records) all.insert(r.id);
  std::set<std::string> joined = train;
  joined.insert(test.begin(), test.end());
  EXPECT_EQ(joined, all);
}

TEST(Split, TooSmallFamilyNamed) {
  const auto m = tiny_manifest({{"a", 5}, {"lонely", 1}});
  try {
    stratified_split(m, 0.2, 1);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("lонely"), std::string::npos);
  }
}

TEST(Split, BadFractionThrows) {
  const auto m = tiny_manifest({{"a", 4}});
  EXPECT_THROW(stratified_split(m, 0.0, 1), DataError);
  EXPECT_THROW(stratified_split(m, 1.0, 1), DataError);
}

// ---------------------------------------------------------------------------
// synthesize

TEST(Synthesize, SingleSampleContract) {
  ScopedTempDir tmp("synth_one");
  auto specs = default_family_specs(1, 1, 3, 8, 8);
  const auto manifest = synthesize_corpus(specs, tmp.path(), 3);
  ASSERT_EQ(manifest.records.size(), 1u);
  EXPECT_EQ(manifest.records[0].byte_length, 8u);
  const auto bin = tmp.path() / manifest.records[0].relpath;
  EXPECT_EQ(fs::file_size(bin), 8u);
  EXPECT_TRUE(fs::exists(fs::path(bin).replace_extension(".asm")));
}

TEST(Synthesize, ByteIdenticalTrees) {
  ScopedTempDir a("synth_a"), b("synth_b");
  auto specs = default_family_specs(2, 4, 11, 256, 512);
  synthesize_corpus(specs, a.path(), 11);
  synthesize_corpus(specs, b.path(), 11);
  EXPECT_EQ(testutil::hash_tree(a.path()), testutil::hash_tree(b.path()));

  ScopedTempDir c("synth_c");
  synthesize_corpus(specs, c.path(), 12);  // different seed, different bytes
  EXPECT_NE(testutil::hash_tree(a.path()), testutil::hash_tree(c.path()));
}

TEST(Synthesize, CountsMatchSpecs) {
  ScopedTempDir tmp("synth_counts");
  auto specs = default_family_specs(5, 30, 21, 64, 128);
  const auto manifest = synthesize_corpus(specs, tmp.path(), 21);
  EXPECT_EQ(manifest.records.size(), 150u);
  std::map<std::string, int> per_family;
  for (const auto& r : manifest.records) ++per_family[r.family];
  for (const auto& [family, n] : per_family) EXPECT_EQ(n, 30);
}

TEST(Synthesize, IngestRoundTripMatchesSpecCounts) {
  ScopedTempDir tmp("synth_roundtrip");
  auto specs = default_family_specs(3, 5, 33, 64, 128);
  const auto manifest = synthesize_corpus(specs, tmp.path(), 33);
  const auto ingested = ingest_directory(tmp.path());
  EXPECT_EQ(ingested.manifest.label_set, manifest.label_set);
  ASSERT_EQ(ingested.manifest.records.size(), manifest.records.size());
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    EXPECT_EQ(ingested.manifest.records[i].id, manifest.records[i].id);
    EXPECT_EQ(ingested.manifest.records[i].byte_length, manifest.records[i].byte_length);
    EXPECT_EQ(ingested.manifest.records[i].opcode_count, manifest.records[i].opcode_count);
  }
}

TEST(Synthesize, FamiliesSeparatedInTotalVariation) {
  const auto specs = default_family_specs(20, 1, 5, 64, 64);
  for (std::size_t i = 0; i < specs.size(); ++i)
    for (std::size_t j = i + 1; j < specs.size(); ++j)
      EXPECT_GE(byte_distribution_tv(specs[i], specs[j]), 0.15)
          << specs[i].family << " vs " << specs[j].family;
}

TEST(Synthesize, SignaturePrefixSwitchesToNeutralGrammar) {
  // Tokens before the prefix boundary follow the family grammar; tokens after
  // it sample uniformly. A grammar pinned to one mnemonic makes the switch
  // visible directly.
  ScopedTempDir tmp("synth_prefix");
  auto specs = default_family_specs(1, 1, 13, 32768, 32768);
  specs[0].signature_prefix = 128;
  for (auto& row : specs[0].opcode_bigrams) {
    std::fill(row.begin(), row.end(), 1e-9);
    row[0] = 1.0;  // family grammar emits mnemonics[0] almost surely
  }
  const auto manifest = synthesize_corpus(specs, tmp.path(), 13);
  const auto listing = read_file_text(
      tmp.path() / fs::path(manifest.records[0].relpath).replace_extension(".asm"));
  const auto seq = parse_listing(listing).sequence.mnemonics;
  ASSERT_GT(seq.size(), 300u);

  const std::string& pinned = specs[0].mnemonics[0];
  int prefix_hits = 0, suffix_hits = 0, suffix_total = 0;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i < 128 && seq[i] == pinned) ++prefix_hits;
    if (i >= 128) {
      ++suffix_total;
      if (seq[i] == pinned) ++suffix_hits;
    }
  }
  EXPECT_GT(prefix_hits, 120);  // prefix pinned (first token is seeded freely)
  EXPECT_LT(static_cast<double>(suffix_hits) / suffix_total, 0.15);  // uniform tail
}

TEST(Synthesize, SpecValidation) {
  auto specs = default_family_specs(1, 1, 5);
  specs[0].byte_markov[0] += 0.5;  // row no longer stochastic
  ScopedTempDir tmp("synth_invalid");
  EXPECT_THROW(synthesize_corpus(specs, tmp.path(), 5), DataError);

  auto dup = default_family_specs(1, 1, 5);
  dup.push_back(dup[0]);
  EXPECT_THROW(synthesize_corpus(dup, tmp.path(), 5), DataError);

  EXPECT_THROW(synthesize_corpus({}, tmp.path(), 5), DataError);
}

// ---------------------------------------------------------------------------
// manifest / split persistence

TEST(ManifestIo, JsonLinesRoundTrip) {
  ScopedTempDir tmp("manifest_io");
  auto specs = default_family_specs(2, 3, 101, 32, 64);
  const auto manifest = synthesize_corpus(specs, tmp.path(), 101);
  write_manifest(tmp.path() / "manifest.jsonl", manifest);
  const auto back = read_manifest(tmp.path() / "manifest.jsonl");
  EXPECT_EQ(back.label_set, manifest.label_set);
  EXPECT_EQ(back.seed, manifest.seed);
  ASSERT_EQ(back.records.size(), manifest.records.size());
  for (std::size_t i = 0; i < back.records.size(); ++i) {
    EXPECT_EQ(back.records[i].id, manifest.records[i].id);
    EXPECT_EQ(back.records[i].family, manifest.records[i].family);
    EXPECT_EQ(back.records[i].relpath, manifest.records[i].relpath);
    EXPECT_EQ(back.records[i].byte_length, manifest.records[i].byte_length);
    EXPECT_EQ(back.records[i].opcode_count, manifest.records[i].opcode_count);
  }

  // header first line with labels/seed keys
  const auto text = read_file_text(tmp.path() / "manifest.jsonl");
  EXPECT_EQ(text.find("labels"), text.find('{') + 2);
}

TEST(SplitIo, JsonRoundTrip) {
  ScopedTempDir tmp("split_io");
  const auto m = tiny_manifest({{"a", 6}, {"b", 9}});
  const auto split = stratified_split(m, 0.25, 77);
  write_split(tmp.path() / "split.json", split);
  const auto back = read_split(tmp.path() / "split.json");
  EXPECT_EQ(back.train_ids, split.train_ids);
  EXPECT_EQ(back.test_ids, split.test_ids);
  EXPECT_DOUBLE_EQ(back.test_fraction, split.test_fraction);
  EXPECT_EQ(back.seed, split.seed);
}

TEST(Rng, PortableStreams) {
  // Frozen values pin the generator so corpora stay identical across builds.
  Rng rng(42);
  const std::uint64_t a = rng.next_u64();
  const std::uint64_t b = rng.next_u64();
  Rng rng2(42);
  EXPECT_EQ(rng2.next_u64(), a);
  EXPECT_EQ(rng2.next_u64(), b);
  Rng rng3(43);
  EXPECT_NE(rng3.next_u64(), a);
}
