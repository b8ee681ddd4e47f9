// mclab: malware-image / opcode-sequence classification lab.
//
// Batch pipeline: synth | ingest | split | featurize-images | featurize-opcodes
// | train | grid | eval | report. Every subcommand writes a run.json with the
// fully resolved configuration under --out and prints one key=value summary
// line. Exit codes: 0 ok, 1 usage, 2 data error, 3 training divergence.

#include <cstdio>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mclab/mclab.hpp"

using namespace mclab;
using nlohmann::json;

namespace {

constexpr std::uint64_t kDefaultMinOpcodes = 10;

void write_run_json(const fs::path& out_dir, const json& config) {
  fs::create_directories(out_dir);
  write_file_text(out_dir / "run.json", config.dump(2) + "\n");
}

void print_summary(const std::map<std::string, std::string>& kv) {
  std::string line = "status=ok";
  for (const auto& [k, v] : kv) line += " " + k + "=" + v;
  std::puts(line.c_str());
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t comma = text.find(',', pos);
    if (comma == std::string::npos) comma = text.size();
    if (comma > pos) out.push_back(std::stoi(text.substr(pos, comma - pos)));
    pos = comma + 1;
  }
  return out;
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t comma = text.find(',', pos);
    if (comma == std::string::npos) comma = text.size();
    if (comma > pos) out.push_back(std::stod(text.substr(pos, comma - pos)));
    pos = comma + 1;
  }
  return out;
}

// "12x6,6x12,12x24" -> {{12,6},{6,12},{12,24}}
std::vector<std::vector<int>> parse_filter_size_list(const std::string& text) {
  std::vector<std::vector<int>> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t comma = text.find(',', pos);
    if (comma == std::string::npos) comma = text.size();
    if (comma > pos) {
      std::vector<int> pair;
      std::string chunk = text.substr(pos, comma - pos);
      std::size_t cpos = 0;
      while (cpos <= chunk.size()) {
        std::size_t x = chunk.find('x', cpos);
        if (x == std::string::npos) x = chunk.size();
        if (x > cpos) pair.push_back(std::stoi(chunk.substr(cpos, x - cpos)));
        cpos = x + 1;
      }
      out.push_back(std::move(pair));
    }
    pos = comma + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shared train/grid plumbing

struct PipelinePaths {
  std::string manifest;
  std::string root;
  std::string split;
  std::string out;
};

struct FeatureFlags {
  std::uint64_t min_opcodes = kDefaultMinOpcodes;
  int vocab_size = 256;
};

struct LoadedData {
  Manifest manifest;
  SplitAssignment split;
  std::vector<std::string> labels;
};

LoadedData load_pipeline_inputs(const PipelinePaths& paths) {
  LoadedData data;
  data.manifest = read_manifest(paths.manifest);
  data.split = read_split(paths.split);
  data.labels = data.manifest.label_set;
  if (data.labels.empty()) throw DataError("manifest has no families");
  return data;
}

/// Featurizes train/test splits for one resolved model spec, caching by the
/// feature signature so grid points with equal inputs share work. Token
/// vocabularies always come from the training split alone.
class FeatureCache {
 public:
  FeatureCache(const LoadedData& data, const fs::path& root, const FeatureFlags& flags)
      : data_(data), root_(root), flags_(flags) {}

  std::pair<const ExampleSet*, const ExampleSet*> get(const ModelSpec& spec) {
    const std::string key = signature(spec);
    auto it = cache_.find(key);
    if (it == cache_.end()) {
      it = cache_.emplace(key, build(spec)).first;
    }
    return {&it->second.first, &it->second.second};
  }

  const Vocabulary& vocabulary() {
    ensure_vocab();
    return vocab_;
  }

 private:
  static bool token_input(const ModelSpec& spec) { return is_token_arch(spec.arch); }

  std::string signature(const ModelSpec& spec) const {
    if (token_input(spec)) return strf("tok:%d", spec.opcode_length);
    const bool flat = spec.arch == "cnn1d" || spec.arch == "cnn1d_refined";
    return strf("img:%d:%d", flat ? 1 : 0, spec.image_dim);
  }

  void ensure_vocab() {
    if (vocab_ready_) return;
    auto train_ids = filter_min_opcodes(data_.manifest, data_.split.train_ids,
                                        flags_.min_opcodes);
    vocab_ = build_vocabulary(load_sequences(data_.manifest, root_, train_ids),
                              static_cast<std::size_t>(flags_.vocab_size));
    vocab_ready_ = true;
  }

  std::pair<ExampleSet, ExampleSet> build(const ModelSpec& spec) {
    if (token_input(spec)) {
      ensure_vocab();
      auto train_ids = filter_min_opcodes(data_.manifest, data_.split.train_ids,
                                          flags_.min_opcodes);
      auto test_ids = filter_min_opcodes(data_.manifest, data_.split.test_ids,
                                         flags_.min_opcodes);
      return {make_opcode_features(data_.manifest, root_, train_ids, vocab_,
                                   spec.opcode_length),
              make_opcode_features(data_.manifest, root_, test_ids, vocab_,
                                   spec.opcode_length)};
    }
    ImagingConfig cfg;
    if (spec.arch == "cnn1d" || spec.arch == "cnn1d_refined") {
      cfg.flat = true;
      cfg.flat_length = spec.image_dim;
    } else {
      cfg.image_dim = spec.image_dim;
    }
    return {make_image_features(data_.manifest, root_, data_.split.train_ids, cfg),
            make_image_features(data_.manifest, root_, data_.split.test_ids, cfg)};
  }

  const LoadedData& data_;
  fs::path root_;
  FeatureFlags flags_;
  Vocabulary vocab_;
  bool vocab_ready_ = false;
  std::map<std::string, std::pair<ExampleSet, ExampleSet>> cache_;
};

void finish_run(const fs::path& out_dir, Network<float>& net, const RunResult& result,
                const LoadedData& data, FeatureCache& cache) {
  save_checkpoint(net, out_dir / "model.ckpt");
  if (is_token_arch(net.spec().arch))
    write_vocabulary(out_dir / "vocab.tsv", cache.vocabulary());
  write_file_text(out_dir / "result.json", json(result).dump(2) + "\n");
  append_ledger(out_dir / "ledger.jsonl", json(result));

  if (!result.failed) {
    auto [train_set, test_set] = cache.get(net.spec());
    auto cm = evaluate(net, *test_set, data.labels);
    write_file_text(out_dir / "confusion.csv", confusion_to_csv(cm));
    write_file_text(out_dir / "confusion.svg", confusion_to_svg(cm, net.spec().arch));
    MetricsReport report = metrics(cm);
    report.model = net.spec().arch;
    report.run_ref = strf("seed=%llu", static_cast<unsigned long long>(result.seed));
    write_file_text(out_dir / "metrics.json", json(report).dump(2) + "\n");
  }
}

// Table 3-5 candidate sets, used when a grid axis flag is not given.
std::vector<std::pair<std::string, std::vector<json>>> default_axes(const std::string& arch) {
  using axis = std::pair<std::string, std::vector<json>>;
  if (arch == "mlp")
    return {axis{"image_dim", {64, 128}}, axis{"learning_rate", {0.001, 0.0001}}};
  if (arch == "cnn2d")
    return {axis{"image_dim", {64, 128, 256, 1024}},
            axis{"learning_rate", {0.001, 0.0001}}};
  if (arch == "cnn1d")
    return {axis{"image_dim", {1024, 2048, 4096, 8192}},
            axis{"learning_rate", {0.001, 0.0001}}};
  if (arch == "cnn1d_refined")
    return {axis{"conv1d_1_out_channel", {64, 128}},
            axis{"conv1d_1_kernel_size", {16, 32}},
            axis{"conv1d_1_stride", {2, 8}},
            axis{"conv1d_2_out_channel", {32, 64, 128}},
            axis{"conv1d_2_kernel_size", {8, 16}},
            axis{"conv1d_2_stride", {2, 4}}};
  if (arch == "cnn_opcode")
    return {axis{"opcode_length", {500, 5000}},
            axis{"num_filters", {3, 6, 9}},
            axis{"filter_size", {std::vector<int>{12, 6}, std::vector<int>{6, 12},
                                 std::vector<int>{12, 24}}},
            axis{"embedding_dim", {128, 512}}};
  if (arch == "rnn" || arch == "lstm" || arch == "gru" || arch == "stacked") {
    std::vector<axis> axes = {axis{"embedding_dim", {256, 1024}},
                              axis{"hidden_dim", {256, 1024}},
                              axis{"num_layers", {1, 3}},
                              axis{"directional", {"uni", "bi"}}};
    if (arch == "stacked") axes.push_back(axis{"LG", {true, false}});
    return axes;
  }
  throw DataError("unknown architecture: " + arch);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mclab: image- and opcode-based malware classification lab"};
  app.require_subcommand(1);

  // --- synth -----------------------------------------------------------
  auto* synth = app.add_subcommand("synth", "generate a deterministic synthetic corpus");
  std::string synth_out;
  int synth_families = 5, synth_samples = 300;
  std::uint64_t synth_seed = 7, synth_min_bytes = 4096, synth_max_bytes = 16384;
  synth->add_option("--out", synth_out, "output corpus root")->envname("MCLAB_OUT")->required();
  synth->add_option("--families", synth_families, "number of synthetic families");
  synth->add_option("--samples", synth_samples, "samples per family");
  synth->add_option("--seed", synth_seed, "generation seed");
  synth->add_option("--min-bytes", synth_min_bytes, "minimum binary size");
  synth->add_option("--max-bytes", synth_max_bytes, "maximum binary size");

  // --- ingest ----------------------------------------------------------
  auto* ingest = app.add_subcommand("ingest", "scan a corpus tree into a manifest");
  std::string ingest_root, ingest_out;
  std::uint64_t ingest_seed = 0;
  ingest->add_option("--root", ingest_root, "corpus root (one directory per family)")->required();
  ingest->add_option("--out", ingest_out, "output directory")->envname("MCLAB_OUT")->required();
  ingest->add_option("--seed", ingest_seed, "seed recorded in the manifest");

  // --- split -----------------------------------------------------------
  auto* split_cmd = app.add_subcommand("split", "stratified train/test split");
  std::string split_manifest, split_out;
  double split_fraction = 0.2;
  std::uint64_t split_seed = 1;
  split_cmd->add_option("--manifest", split_manifest, "manifest.jsonl path")->required();
  split_cmd->add_option("--fraction", split_fraction, "test fraction in (0,1)");
  split_cmd->add_option("--seed", split_seed, "shuffle seed");
  split_cmd->add_option("--out", split_out, "output directory")->envname("MCLAB_OUT")->required();

  // --- featurize-images --------------------------------------------------
  auto* fimg = app.add_subcommand("featurize-images", "write byte-image PGMs");
  std::string fimg_manifest, fimg_root, fimg_out, fimg_resize = "nearest";
  int fimg_dim = 128, fimg_flat_length = 4096;
  bool fimg_flat = false, fimg_raw = false;
  fimg->add_option("--manifest", fimg_manifest)->required();
  fimg->add_option("--root", fimg_root)->required();
  fimg->add_option("--out", fimg_out)->envname("MCLAB_OUT")->required();
  fimg->add_option("--image_dim", fimg_dim, "square image dimension");
  fimg->add_flag("--flat", fimg_flat, "emit 1-pixel-high images");
  fimg->add_option("--flat_length", fimg_flat_length, "flat image length");
  fimg->add_option("--resize", fimg_resize, "nearest|bilinear");
  fimg->add_flag("--raw", fimg_raw, "also write raw row-major .bin sidecars");

  // --- featurize-opcodes --------------------------------------------------
  auto* fops = app.add_subcommand("featurize-opcodes", "tokenize listings and encode ids");
  std::string fops_manifest, fops_root, fops_split, fops_out;
  int fops_n = 500, fops_vocab = 256;
  std::uint64_t fops_min_opcodes = kDefaultMinOpcodes;
  fops->add_option("--manifest", fops_manifest)->required();
  fops->add_option("--root", fops_root)->required();
  fops->add_option("--split", fops_split, "split.json (vocabulary uses the train side only)")->required();
  fops->add_option("--out", fops_out)->envname("MCLAB_OUT")->required();
  fops->add_option("--opcode_length", fops_n, "encoded sequence length");
  fops->add_option("--vocab-size", fops_vocab, "vocabulary cap including PAD/UNK");
  fops->add_option("--min-opcodes", fops_min_opcodes, "exclude samples with fewer opcodes");

  // --- train / grid shared flags ----------------------------------------
  auto add_pipeline_flags = [](CLI::App* cmd, PipelinePaths& paths) {
    cmd->add_option("--manifest", paths.manifest)->required();
    cmd->add_option("--root", paths.root)->required();
    cmd->add_option("--split", paths.split)->required();
    cmd->add_option("--out", paths.out)->envname("MCLAB_OUT")->required();
  };

  auto* train_cmd = app.add_subcommand("train", "train one model configuration");
  PipelinePaths train_paths;
  add_pipeline_flags(train_cmd, train_paths);
  std::string train_arch;
  ModelSpec train_spec;
  TrainConfig train_cfg;
  FeatureFlags train_feat;
  std::string train_directional = "uni", train_filter_size = "12,24";
  train_cmd->add_option("--arch", train_arch,
                        "mlp|cnn2d|cnn1d|cnn1d_refined|cnn_opcode|rnn|lstm|gru|stacked")
      ->required();
  train_cmd->add_option("--image_dim", train_spec.image_dim);
  train_cmd->add_option("--embedding_dim", train_spec.embedding_dim);
  train_cmd->add_option("--hidden_dim", train_spec.hidden_dim);
  train_cmd->add_option("--num_layers", train_spec.num_layers);
  train_cmd->add_option("--directional", train_directional, "uni|bi");
  train_cmd->add_flag("--LG,!--no-LG", train_spec.lg, "stacked order: LSTM feeds GRU");
  train_cmd->add_option("--opcode_length", train_spec.opcode_length);
  train_cmd->add_option("--num_filters", train_spec.num_filters);
  train_cmd->add_option("--filter_size", train_filter_size, "comma list, e.g. 12,24");
  train_cmd->add_option("--conv1d_1_out_channel", train_spec.conv1_out);
  train_cmd->add_option("--conv1d_1_kernel_size", train_spec.conv1_kernel);
  train_cmd->add_option("--conv1d_1_stride", train_spec.conv1_stride);
  train_cmd->add_option("--conv1d_2_out_channel", train_spec.conv2_out);
  train_cmd->add_option("--conv1d_2_kernel_size", train_spec.conv2_kernel);
  train_cmd->add_option("--conv1d_2_stride", train_spec.conv2_stride);
  train_cmd->add_option("--learning_rate", train_cfg.learning_rate);
  train_cmd->add_option("--batch_size", train_cfg.batch_size);
  train_cmd->add_option("--epochs", train_cfg.epochs);
  train_cmd->add_option("--optimizer", train_cfg.optimizer, "adam|sgd");
  train_cmd->add_option("--grad_clip", train_cfg.grad_clip_norm,
                        "max global gradient norm (0 = off)");
  train_cmd->add_option("--seed", train_cfg.seed);
  train_cmd->add_option("--init-seed", train_spec.init_seed);
  train_cmd->add_option("--vocab-size", train_feat.vocab_size);
  train_cmd->add_option("--min-opcodes", train_feat.min_opcodes);

  auto* grid_cmd = app.add_subcommand("grid", "cartesian hyperparameter search");
  PipelinePaths grid_paths;
  add_pipeline_flags(grid_cmd, grid_paths);
  std::string grid_arch;
  TrainConfig grid_cfg;
  ModelSpec grid_base;
  FeatureFlags grid_feat;
  int grid_workers = 1;
  std::string grid_image_dims, grid_lrs, grid_embedding_dims, grid_hidden_dims;
  std::string grid_num_layers, grid_directionals, grid_lgs, grid_opcode_lengths;
  std::string grid_num_filters, grid_filter_sizes;
  std::string grid_conv1_outs, grid_conv1_kernels, grid_conv1_strides;
  std::string grid_conv2_outs, grid_conv2_kernels, grid_conv2_strides;
  grid_cmd->add_option("--arch", grid_arch)->required();
  grid_cmd->add_option("--image-dims", grid_image_dims, "comma list, e.g. 64,128");
  grid_cmd->add_option("--lrs", grid_lrs, "comma list, e.g. 0.001,0.0001");
  grid_cmd->add_option("--embedding-dims", grid_embedding_dims);
  grid_cmd->add_option("--hidden-dims", grid_hidden_dims);
  grid_cmd->add_option("--num-layers-list", grid_num_layers);
  grid_cmd->add_option("--directionals", grid_directionals, "e.g. uni,bi");
  grid_cmd->add_option("--LGs", grid_lgs, "e.g. true,false");
  grid_cmd->add_option("--opcode-lengths", grid_opcode_lengths);
  grid_cmd->add_option("--num-filters-list", grid_num_filters);
  grid_cmd->add_option("--filter-sizes", grid_filter_sizes, "e.g. 12x6,6x12,12x24");
  grid_cmd->add_option("--conv1-outs", grid_conv1_outs);
  grid_cmd->add_option("--conv1-kernels", grid_conv1_kernels);
  grid_cmd->add_option("--conv1-strides", grid_conv1_strides);
  grid_cmd->add_option("--conv2-outs", grid_conv2_outs);
  grid_cmd->add_option("--conv2-kernels", grid_conv2_kernels);
  grid_cmd->add_option("--conv2-strides", grid_conv2_strides);
  grid_cmd->add_option("--opcode_length", grid_base.opcode_length,
                       "fixed encode length when not an axis");
  grid_cmd->add_option("--image_dim", grid_base.image_dim, "fixed dim when not an axis");
  grid_cmd->add_option("--learning_rate", grid_cfg.learning_rate);
  grid_cmd->add_option("--batch_size", grid_cfg.batch_size);
  grid_cmd->add_option("--epochs", grid_cfg.epochs);
  grid_cmd->add_option("--optimizer", grid_cfg.optimizer);
  grid_cmd->add_option("--grad_clip", grid_cfg.grad_clip_norm,
                       "max global gradient norm (0 = off)");
  grid_cmd->add_option("--seed", grid_cfg.seed);
  grid_cmd->add_option("--init-seed", grid_base.init_seed);
  grid_cmd->add_option("--vocab-size", grid_feat.vocab_size);
  grid_cmd->add_option("--min-opcodes", grid_feat.min_opcodes);
  grid_cmd->add_option("--workers", grid_workers, "parallel grid workers (1 = reproducible)");

  // --- eval --------------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  std::string eval_ckpt, eval_manifest, eval_root, eval_split, eval_out, eval_vocab;
  std::uint64_t eval_min_opcodes = kDefaultMinOpcodes;
  eval_cmd->add_option("--checkpoint", eval_ckpt)->required();
  eval_cmd->add_option("--manifest", eval_manifest)->required();
  eval_cmd->add_option("--root", eval_root)->required();
  eval_cmd->add_option("--split", eval_split)->required();
  eval_cmd->add_option("--out", eval_out)->envname("MCLAB_OUT")->required();
  eval_cmd->add_option("--vocab", eval_vocab, "vocab.tsv (default: next to checkpoint)");
  eval_cmd->add_option("--min-opcodes", eval_min_opcodes);

  // --- report --------------------------------------------------------------
  auto* report_cmd = app.add_subcommand("report", "comparison chart and summaries");
  std::string report_inputs, report_out;
  report_cmd->add_option("--inputs", report_inputs, "comma list of run directories")->required();
  report_cmd->add_option("--out", report_out)->envname("MCLAB_OUT")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n" << app.help() << std::flush;
    return 1;
  }

  try {
    if (*synth) {
      if (synth_families <= 0 || synth_samples <= 0)
        throw DataError("families and samples must be positive");
      const fs::path out(synth_out);
      write_run_json(out, json{{"command", "synth"},
                               {"families", synth_families},
                               {"samples", synth_samples},
                               {"seed", synth_seed},
                               {"min_bytes", synth_min_bytes},
                               {"max_bytes", synth_max_bytes}});
      auto specs = default_family_specs(synth_families, synth_samples, synth_seed,
                                        synth_min_bytes, synth_max_bytes);
      Manifest manifest = synthesize_corpus(specs, out, synth_seed);
      write_manifest(out / "manifest.jsonl", manifest);
      print_summary({{"cmd", "synth"},
                     {"families", std::to_string(synth_families)},
                     {"records", std::to_string(manifest.records.size())},
                     {"seed", std::to_string(synth_seed)},
                     {"out", synth_out}});
    } else if (*ingest) {
      const fs::path out(ingest_out);
      write_run_json(out, json{{"command", "ingest"}, {"root", ingest_root},
                               {"seed", ingest_seed}});
      IngestResult result = ingest_directory(ingest_root);
      result.manifest.seed = ingest_seed;
      write_manifest(out / "manifest.jsonl", result.manifest);
      print_summary({{"cmd", "ingest"},
                     {"records", std::to_string(result.manifest.records.size())},
                     {"families", std::to_string(result.manifest.label_set.size())},
                     {"skipped", std::to_string(result.skipped)},
                     {"out", ingest_out}});
    } else if (*split_cmd) {
      const fs::path out(split_out);
      write_run_json(out, json{{"command", "split"},
                               {"manifest", split_manifest},
                               {"fraction", split_fraction},
                               {"seed", split_seed}});
      Manifest manifest = read_manifest(split_manifest);
      SplitAssignment split = stratified_split(manifest, split_fraction, split_seed);
      write_split(out / "split.json", split);
      print_summary({{"cmd", "split"},
                     {"train", std::to_string(split.train_ids.size())},
                     {"test", std::to_string(split.test_ids.size())},
                     {"seed", std::to_string(split_seed)},
                     {"out", split_out}});
    } else if (*fimg) {
      const fs::path out(fimg_out);
      if (fimg_resize != "nearest" && fimg_resize != "bilinear")
        throw DataError("unknown resize method: " + fimg_resize);
      write_run_json(out, json{{"command", "featurize-images"},
                               {"manifest", fimg_manifest},
                               {"root", fimg_root},
                               {"image_dim", fimg_dim},
                               {"flat", fimg_flat},
                               {"flat_length", fimg_flat_length},
                               {"resize", fimg_resize},
                               {"raw", fimg_raw}});
      Manifest manifest = read_manifest(fimg_manifest);
      ImagingConfig cfg;
      cfg.image_dim = fimg_dim;
      cfg.flat = fimg_flat;
      cfg.flat_length = fimg_flat_length;
      cfg.resize = fimg_resize == "bilinear" ? ResizeMethod::bilinear : ResizeMethod::nearest;
      const int written = export_images(manifest, fimg_root, out, cfg, fimg_raw);
      print_summary({{"cmd", "featurize-images"},
                     {"images", std::to_string(written)},
                     {"out", fimg_out}});
    } else if (*fops) {
      const fs::path out(fops_out);
      write_run_json(out, json{{"command", "featurize-opcodes"},
                               {"manifest", fops_manifest},
                               {"root", fops_root},
                               {"split", fops_split},
                               {"opcode_length", fops_n},
                               {"vocab_size", fops_vocab},
                               {"min_opcodes", fops_min_opcodes}});
      Manifest manifest = read_manifest(fops_manifest);
      SplitAssignment split = read_split(fops_split);
      auto train_ids = filter_min_opcodes(manifest, split.train_ids, fops_min_opcodes);
      auto all_ids = filter_min_opcodes(manifest, split.train_ids, fops_min_opcodes);
      auto test_ids = filter_min_opcodes(manifest, split.test_ids, fops_min_opcodes);
      all_ids.insert(all_ids.end(), test_ids.begin(), test_ids.end());
      std::sort(all_ids.begin(), all_ids.end());
      export_opcodes(manifest, fops_root, out, train_ids, all_ids, fops_n,
                     static_cast<std::size_t>(fops_vocab));
      print_summary({{"cmd", "featurize-opcodes"},
                     {"samples", std::to_string(all_ids.size())},
                     {"opcode_length", std::to_string(fops_n)},
                     {"out", fops_out}});
    } else if (*train_cmd) {
      train_spec.arch = train_arch;
      train_spec.bidirectional = train_directional == "bi";
      train_spec.filter_sizes = parse_int_list(train_filter_size);
      const fs::path out(train_paths.out);

      LoadedData data = load_pipeline_inputs(train_paths);
      train_spec.num_classes = static_cast<int>(data.labels.size());
      FeatureCache cache(data, train_paths.root, train_feat);
      if (is_token_arch(train_arch)) {
        cache.get(train_spec);  // builds vocabulary
        train_spec.vocab_size = cache.vocabulary().size();
      }
      write_run_json(out, json{{"command", "train"},
                               {"paths", {{"manifest", train_paths.manifest},
                                          {"root", train_paths.root},
                                          {"split", train_paths.split}}},
                               {"model", train_spec},
                               {"train", train_cfg},
                               {"min_opcodes", train_feat.min_opcodes},
                               {"vocab_size_cap", train_feat.vocab_size}});

      auto [train_set, test_set] = cache.get(train_spec);
      auto net = build_model<float>(train_spec);
      RunResult result = train(*net, *train_set, *test_set, train_cfg);
      finish_run(out, *net, result, data, cache);
      if (result.failed) {
        std::printf("status=failed cmd=train arch=%s failed_epoch=%d out=%s\n",
                    train_arch.c_str(), result.failed_epoch, train_paths.out.c_str());
        return 3;
      }
      print_summary({{"cmd", "train"},
                     {"arch", train_arch},
                     {"train_acc", strf("%.6f", result.train_acc)},
                     {"test_acc", strf("%.6f", result.test_acc)},
                     {"seed", std::to_string(train_cfg.seed)},
                     {"out", train_paths.out}});
    } else if (*grid_cmd) {
      const fs::path out(grid_paths.out);
      GridSpec grid;
      grid.arch = grid_arch;
      auto axes = default_axes(grid_arch);
      auto override_axis = [&axes](const std::string& name, std::vector<json> values) {
        for (auto& [axis_name, axis_values] : axes)
          if (axis_name == name) {
            axis_values = std::move(values);
            return;
          }
        axes.emplace_back(name, std::move(values));
      };
      auto int_axis = [&](const std::string& flag, const std::string& name) {
        if (flag.empty()) return;
        std::vector<json> values;
        for (int v : parse_int_list(flag)) values.push_back(v);
        override_axis(name, std::move(values));
      };
      int_axis(grid_image_dims, "image_dim");
      int_axis(grid_embedding_dims, "embedding_dim");
      int_axis(grid_hidden_dims, "hidden_dim");
      int_axis(grid_num_layers, "num_layers");
      int_axis(grid_opcode_lengths, "opcode_length");
      int_axis(grid_num_filters, "num_filters");
      int_axis(grid_conv1_outs, "conv1d_1_out_channel");
      int_axis(grid_conv1_kernels, "conv1d_1_kernel_size");
      int_axis(grid_conv1_strides, "conv1d_1_stride");
      int_axis(grid_conv2_outs, "conv1d_2_out_channel");
      int_axis(grid_conv2_kernels, "conv1d_2_kernel_size");
      int_axis(grid_conv2_strides, "conv1d_2_stride");
      if (!grid_lrs.empty()) {
        std::vector<json> values;
        for (double v : parse_double_list(grid_lrs)) values.push_back(v);
        override_axis("learning_rate", std::move(values));
      }
      if (!grid_directionals.empty()) {
        std::vector<json> values;
        std::size_t pos = 0;
        while (pos <= grid_directionals.size()) {
          std::size_t comma = grid_directionals.find(',', pos);
          if (comma == std::string::npos) comma = grid_directionals.size();
          if (comma > pos) values.push_back(grid_directionals.substr(pos, comma - pos));
          pos = comma + 1;
        }
        override_axis("directional", std::move(values));
      }
      if (!grid_lgs.empty()) {
        std::vector<json> values;
        for (const auto& tok : parse_int_list(grid_lgs == "true,false" ? "1,0"
                                              : grid_lgs == "false,true" ? "0,1"
                                              : grid_lgs))
          values.push_back(tok != 0);
        override_axis("LG", std::move(values));
      }
      if (!grid_filter_sizes.empty()) {
        std::vector<json> values;
        for (auto& pair : parse_filter_size_list(grid_filter_sizes)) values.push_back(pair);
        override_axis("filter_size", std::move(values));
      }
      grid.axes = axes;

      LoadedData data = load_pipeline_inputs(grid_paths);
      grid_base.num_classes = static_cast<int>(data.labels.size());
      FeatureCache cache(data, grid_paths.root, grid_feat);
      if (is_token_arch(grid_arch)) grid_base.vocab_size = 0;  // resolved per point

      nlohmann::json axes_json;
      for (const auto& [name, values] : axes) axes_json[name] = values;
      write_run_json(out, json{{"command", "grid"},
                               {"arch", grid_arch},
                               {"axes", axes_json},
                               {"base_model", grid_base},
                               {"base_train", grid_cfg},
                               {"workers", grid_workers}});

      DataProvider provider = [&cache](const ModelSpec& spec) {
        return cache.get(spec);
      };
      // Token vocabularies are shared across points; resolve the size once.
      ModelSpec resolved_base = grid_base;
      resolved_base.arch = grid_arch;
      if (is_token_arch(grid_arch)) {
        cache.get(resolved_base);
        resolved_base.vocab_size = cache.vocabulary().size();
      }
      auto results = grid_search(grid, resolved_base, grid_cfg, provider,
                                 out / "ledger.jsonl", grid_workers);
      print_summary({{"cmd", "grid"},
                     {"arch", grid_arch},
                     {"runs", std::to_string(results.size())},
                     {"best_test_acc", strf("%.6f", results.empty() ? 0.0 : results.front().test_acc)},
                     {"best", results.empty() ? "" : results.front().grid_key},
                     {"out", grid_paths.out}});
    } else if (*eval_cmd) {
      const fs::path out(eval_out);
      write_run_json(out, json{{"command", "eval"},
                               {"checkpoint", eval_ckpt},
                               {"manifest", eval_manifest},
                               {"root", eval_root},
                               {"split", eval_split},
                               {"min_opcodes", eval_min_opcodes}});
      auto net = load_checkpoint<float>(eval_ckpt);
      Manifest manifest = read_manifest(eval_manifest);
      SplitAssignment split = read_split(eval_split);

      ExampleSet test_set;
      if (is_token_arch(net->spec().arch)) {
        fs::path vocab_path = eval_vocab.empty()
                                  ? fs::path(eval_ckpt).parent_path() / "vocab.tsv"
                                  : fs::path(eval_vocab);
        Vocabulary vocab = read_vocabulary(vocab_path);
        if (vocab.size() != net->spec().vocab_size)
          throw DataError(strf("vocabulary size %d does not match checkpoint %d",
                               vocab.size(), net->spec().vocab_size));
        auto ids = filter_min_opcodes(manifest, split.test_ids, eval_min_opcodes);
        test_set = make_opcode_features(manifest, eval_root, ids, vocab,
                                        net->spec().opcode_length);
      } else {
        ImagingConfig cfg;
        if (net->spec().arch == "cnn1d" || net->spec().arch == "cnn1d_refined") {
          cfg.flat = true;
          cfg.flat_length = net->spec().image_dim;
        } else {
          cfg.image_dim = net->spec().image_dim;
        }
        test_set = make_image_features(manifest, eval_root, split.test_ids, cfg);
      }
      auto cm = evaluate(*net, test_set, manifest.label_set);
      write_file_text(out / "confusion.csv", confusion_to_csv(cm));
      write_file_text(out / "confusion.svg", confusion_to_svg(cm, net->spec().arch));
      MetricsReport report = metrics(cm);
      report.model = net->spec().arch;
      report.run_ref = "checkpoint=" + eval_ckpt;
      write_file_text(out / "metrics.json", json(report).dump(2) + "\n");
      print_summary({{"cmd", "eval"},
                     {"arch", net->spec().arch},
                     {"accuracy", strf("%.6f", report.overall_accuracy)},
                     {"out", eval_out}});
    } else if (*report_cmd) {
      const fs::path out(report_out);
      write_run_json(out, json{{"command", "report"}, {"inputs", report_inputs}});
      std::vector<ReportEntry> entries;
      std::size_t pos = 0;
      while (pos <= report_inputs.size()) {
        std::size_t comma = report_inputs.find(',', pos);
        if (comma == std::string::npos) comma = report_inputs.size();
        if (comma > pos) {
          const fs::path dir(report_inputs.substr(pos, comma - pos));
          ReportEntry entry;
          RunResult result = json::parse(read_file_text(dir / "result.json")).get<RunResult>();
          entry.name = result.model.arch;
          entry.train_acc = result.train_acc;
          if (fs::exists(dir / "metrics.json"))
            entry.report = json::parse(read_file_text(dir / "metrics.json")).get<MetricsReport>();
          else
            entry.report.overall_accuracy = result.test_acc;
          entry.report.model = entry.name;
          if (fs::exists(dir / "confusion.csv"))
            entry.confusion = confusion_from_csv(read_file_text(dir / "confusion.csv"));
          entries.push_back(std::move(entry));
        }
        pos = comma + 1;
      }
      emit_report(entries, out);
      print_summary({{"cmd", "report"},
                     {"models", std::to_string(entries.size())},
                     {"out", report_out}});
    }
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
