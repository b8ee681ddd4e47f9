#ifndef MCLAB_TRAINING_HPP
#define MCLAB_TRAINING_HPP

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "mclab/features.hpp"
#include "mclab/models.hpp"
#include "mclab/rng.hpp"

namespace mclab {

struct TrainConfig {
  double learning_rate = 0.001;
  int batch_size = 128;
  int epochs = 20;
  std::string optimizer = "adam";  // adam | sgd
  double grad_clip_norm = 0.0;     // 0 = off; > 0 clips the global grad norm
  std::uint64_t seed = 1;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"optimizer", c.optimizer},
                     {"grad_clip_norm", c.grad_clip_norm},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("learning_rate").get_to(c.learning_rate);
  j.at("batch_size").get_to(c.batch_size);
  j.at("epochs").get_to(c.epochs);
  j.at("optimizer").get_to(c.optimizer);
  c.grad_clip_norm = j.value("grad_clip_norm", 0.0);
  j.at("seed").get_to(c.seed);
}

struct EpochStats {
  double loss = 0.0;
  double accuracy = 0.0;
};

struct RunResult {
  ModelSpec model;
  TrainConfig config;
  std::vector<EpochStats> epoch_stats;  // batch-averaged training loss/accuracy
  double train_acc = 0.0;               // full-split evaluation after training
  double test_acc = 0.0;
  double wall_time_s = 0.0;
  std::uint64_t seed = 0;
  bool failed = false;
  int failed_epoch = -1;
  std::string grid_key;  // set by grid_search for resumability
};

inline void to_json(nlohmann::json& j, const RunResult& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.epoch_stats)
    epochs.push_back({{"loss", e.loss}, {"accuracy", e.accuracy}});
  j = nlohmann::json{{"model", r.model},
                     {"config", r.config},
                     {"epochs", epochs},
                     {"train_acc", r.train_acc},
                     {"test_acc", r.test_acc},
                     {"wall_time_s", r.wall_time_s},
                     {"seed", r.seed},
                     {"failed", r.failed},
                     {"failed_epoch", r.failed_epoch},
                     {"grid_key", r.grid_key}};
}

inline void from_json(const nlohmann::json& j, RunResult& r) {
  j.at("model").get_to(r.model);
  j.at("config").get_to(r.config);
  r.epoch_stats.clear();
  for (const auto& e : j.at("epochs"))
    r.epoch_stats.push_back({e.at("loss").get<double>(), e.at("accuracy").get<double>()});
  j.at("train_acc").get_to(r.train_acc);
  j.at("test_acc").get_to(r.test_acc);
  j.at("wall_time_s").get_to(r.wall_time_s);
  j.at("seed").get_to(r.seed);
  j.at("failed").get_to(r.failed);
  j.at("failed_epoch").get_to(r.failed_epoch);
  j.at("grid_key").get_to(r.grid_key);
}

// ---------------------------------------------------------------------------
// Optimizers

template <typename T>
void sgd_step(ParameterStore<T>& params, double lr) {
  for (auto& [name, t] : params.items()) {
    if (!t.grad_allocated()) continue;
    T* p = t.data().data();
    const T* g = t.grad().data();
    const T step = static_cast<T>(lr);
    for (std::size_t i = 0; i < t.numel(); ++i) p[i] -= step * g[i];
  }
}

/// Scales all gradients so their global L2 norm is at most max_norm.
/// Returns the pre-clip norm.
template <typename T>
double clip_grad_norm(ParameterStore<T>& params, double max_norm) {
  double sq = 0.0;
  for (auto& [name, t] : params.items()) {
    if (!t.grad_allocated()) continue;
    for (const T g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T scale = static_cast<T>(max_norm / norm);
    for (auto& [name, t] : params.items()) {
      if (!t.grad_allocated()) continue;
      for (T& g : t.grad()) g *= scale;
    }
  }
  return norm;
}

/// Adam moment buffers, keyed by parameter name.
template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t t = 0;
  std::unordered_map<std::string, std::vector<T>> m, v;
};

template <typename T>
void adam_step(ParameterStore<T>& params, AdamState<T>& state, double lr) {
  ++state.t;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (auto& [name, tensor] : params.items()) {
    if (!tensor.grad_allocated()) continue;
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) m.assign(tensor.numel(), T(0));
    if (v.empty()) v.assign(tensor.numel(), T(0));
    T* p = tensor.data().data();
    const T* g = tensor.grad().data();
    const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
    for (std::size_t i = 0; i < tensor.numel(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      const double mhat = static_cast<double>(m[i]) / bc1;
      const double vhat = static_cast<double>(v[i]) / bc2;
      p[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + state.epsilon));
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop

/// Inference accuracy over a whole example set.
inline double accuracy(Network<float>& net, const ExampleSet& set, int batch_size) {
  if (set.size() == 0) return 0.0;
  std::size_t correct = 0;
  Tape tape;  // inference still records; cleared per batch
  for (std::size_t start = 0; start < set.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(set.size(), start + batch_size); ++i)
      idx.push_back(i);
    auto batch = make_batch<float>(set, idx);
    auto logits = net.forward(tape, batch, ForwardOptions{});
    const auto pred = argmax_rows(logits);
    for (std::size_t i = 0; i < idx.size(); ++i)
      if (pred[i] == batch.labels[i]) ++correct;
    tape.clear();
  }
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

/// Seeded-shuffle mini-batch training with softmax cross-entropy. Mutates the
/// model in place; calling again continues from the current parameters.
/// A non-finite loss marks the run failed at that epoch instead of throwing.
inline RunResult train(Network<float>& net, const ExampleSet& train_set,
                       const ExampleSet& test_set, const TrainConfig& cfg) {
  if (cfg.batch_size <= 0 || cfg.epochs < 1)
    throw DataError("train config requires positive batch size and epochs >= 1");
  if (cfg.optimizer != "adam" && cfg.optimizer != "sgd")
    throw DataError("unknown optimizer: " + cfg.optimizer);
  if (train_set.size() == 0) throw DataError("empty training set");

  const auto t0 = std::chrono::steady_clock::now();
  RunResult result;
  result.model = net.spec();
  result.config = cfg;
  result.seed = cfg.seed;

  AdamState<float> adam;
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs && !result.failed; ++epoch) {
    Rng shuffle_rng(mix_seed({cfg.seed, 0x53485546ull, static_cast<std::uint64_t>(epoch)}));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    Tape tape;
    int batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      std::vector<std::size_t> idx(order.begin() + start,
                                   order.begin() + std::min(order.size(),
                                                            start + cfg.batch_size));
      auto batch = make_batch<float>(train_set, idx);
      ForwardOptions opt;
      opt.training = true;
      opt.dropout_seed = mix_seed({cfg.seed, 0x44524f50ull,
                                   static_cast<std::uint64_t>(epoch),
                                   static_cast<std::uint64_t>(batch_index)});
      auto logits = net.forward(tape, batch, opt);
      auto loss = softmax_cross_entropy(tape, logits, batch.labels);
      const float loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        result.failed = true;
        result.failed_epoch = epoch;
        break;
      }
      loss_sum += static_cast<double>(loss_value) * static_cast<double>(idx.size());
      const auto pred = argmax_rows(logits);
      for (std::size_t i = 0; i < idx.size(); ++i)
        if (pred[i] == batch.labels[i]) ++correct;

      net.params().zero_grads();
      tape.backward(loss);
      if (cfg.grad_clip_norm > 0.0) clip_grad_norm(net.params(), cfg.grad_clip_norm);
      if (cfg.optimizer == "adam")
        adam_step(net.params(), adam, cfg.learning_rate);
      else
        sgd_step(net.params(), cfg.learning_rate);
      tape.clear();
    }
    if (!result.failed) {
      EpochStats stats;
      stats.loss = loss_sum / static_cast<double>(order.size());
      stats.accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
      result.epoch_stats.push_back(stats);
    }
  }

  if (!result.failed) {
    result.train_acc = accuracy(net, train_set, cfg.batch_size);
    result.test_acc = test_set.size() ? accuracy(net, test_set, cfg.batch_size) : 0.0;
  }
  result.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

// ---------------------------------------------------------------------------
// Grid search

/// Cartesian hyperparameter grid: ordered axes of (name, candidate values).
struct GridSpec {
  std::string arch;
  std::vector<std::pair<std::string, std::vector<nlohmann::json>>> axes;

  std::size_t total_points() const {
    std::size_t n = 1;
    for (const auto& [name, values] : axes) {
      if (values.empty()) throw DataError("empty grid axis: " + name);
      n *= values.size();
    }
    return n;
  }
};

/// Applies one hyperparameter assignment to the model spec or train config.
/// Axis names mirror the flag spelling used throughout.
inline void apply_grid_value(const std::string& name, const nlohmann::json& value,
                             ModelSpec& spec, TrainConfig& cfg) {
  if (name == "image_dim") spec.image_dim = value.get<int>();
  else if (name == "learning_rate") cfg.learning_rate = value.get<double>();
  else if (name == "batch_size") cfg.batch_size = value.get<int>();
  else if (name == "epochs") cfg.epochs = value.get<int>();
  else if (name == "embedding_dim") spec.embedding_dim = value.get<int>();
  else if (name == "hidden_dim") spec.hidden_dim = value.get<int>();
  else if (name == "num_layers") spec.num_layers = value.get<int>();
  else if (name == "directional") spec.bidirectional = value.get<std::string>() == "bi";
  else if (name == "LG") spec.lg = value.get<bool>();
  else if (name == "opcode_length") spec.opcode_length = value.get<int>();
  else if (name == "num_filters") spec.num_filters = value.get<int>();
  else if (name == "filter_size") spec.filter_sizes = value.get<std::vector<int>>();
  else if (name == "conv1d_1_out_channel") spec.conv1_out = value.get<int>();
  else if (name == "conv1d_1_kernel_size") spec.conv1_kernel = value.get<int>();
  else if (name == "conv1d_1_stride") spec.conv1_stride = value.get<int>();
  else if (name == "conv1d_2_out_channel") spec.conv2_out = value.get<int>();
  else if (name == "conv1d_2_kernel_size") spec.conv2_kernel = value.get<int>();
  else if (name == "conv1d_2_stride") spec.conv2_stride = value.get<int>();
  else throw DataError("unknown grid axis: " + name);
}

/// Supplies train/test features for a resolved candidate spec (feature shape
/// can depend on the hyperparameters, e.g. image_dim).
using DataProvider = std::function<std::pair<const ExampleSet*, const ExampleSet*>(
    const ModelSpec&)>;

inline void append_ledger(const fs::path& path, const nlohmann::json& line) {
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) throw DataError("cannot append to ledger: " + path.string());
  out << line.dump() << '\n';
}

/// One training run per cartesian point, ranked by test accuracy. Results are
/// appended to the ledger as they complete; points already present in the
/// ledger are replayed, which makes interrupted grids resumable. A final
/// summary line flags the best point.
inline std::vector<RunResult> grid_search(const GridSpec& grid, const ModelSpec& base_spec,
                                          const TrainConfig& base_cfg,
                                          const DataProvider& data,
                                          const fs::path& ledger_path, int workers = 1) {
  const std::size_t total = grid.total_points();

  // Enumerate all points, in axis-major order.
  struct Point {
    ModelSpec spec;
    TrainConfig cfg;
    std::string key;
  };
  std::vector<Point> points;
  points.reserve(total);
  for (std::size_t p = 0; p < total; ++p) {
    Point point;
    point.spec = base_spec;
    point.spec.arch = grid.arch;
    point.cfg = base_cfg;
    nlohmann::json assignment;
    std::size_t rem = p;
    for (const auto& [name, values] : grid.axes) {
      const auto& v = values[rem % values.size()];
      rem /= values.size();
      apply_grid_value(name, v, point.spec, point.cfg);
      assignment[name] = v;
    }
    point.key = assignment.dump();
    points.push_back(std::move(point));
  }

  // Replay completed points from an existing ledger.
  std::unordered_map<std::string, RunResult> done;
  if (fs::exists(ledger_path)) {
    const std::string text = read_file_text(ledger_path);
    std::size_t pos = 0;
    while (pos < text.size()) {
      std::size_t eol = text.find('\n', pos);
      if (eol == std::string::npos) eol = text.size();
      const std::string line = text.substr(pos, eol - pos);
      pos = eol + 1;
      if (line.empty()) continue;
      nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.contains("grid_key")) continue;
      RunResult r = j.get<RunResult>();
      if (!r.grid_key.empty()) done[r.grid_key] = std::move(r);
    }
  }

  std::vector<RunResult> results(points.size());
  std::mutex ledger_mutex;
  std::size_t next = 0;
  std::mutex queue_mutex;

  auto run_point = [&](std::size_t i) {
    const Point& point = points[i];
    auto it = done.find(point.key);
    if (it != done.end()) {
      results[i] = it->second;
      return;
    }
    RunResult r;
    try {
      auto [train_set, test_set] = data(point.spec);
      auto net = build_model<float>(point.spec);
      r = train(*net, *train_set, *test_set, point.cfg);
    } catch (const Error& e) {
      r.model = point.spec;
      r.config = point.cfg;
      r.seed = point.cfg.seed;
      r.failed = true;
    }
    r.grid_key = point.key;
    {
      std::lock_guard<std::mutex> lock(ledger_mutex);
      append_ledger(ledger_path, nlohmann::json(r));
    }
    results[i] = std::move(r);
  };

  if (workers <= 1) {
    for (std::size_t i = 0; i < points.size(); ++i) run_point(i);
  } else {
    auto worker = [&]() {
      while (true) {
        std::size_t i;
        {
          std::lock_guard<std::mutex> lock(queue_mutex);
          if (next >= points.size()) return;
          i = next++;
        }
        run_point(i);
      }
    };
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::stable_sort(results.begin(), results.end(), [](const RunResult& a, const RunResult& b) {
    if (a.failed != b.failed) return !a.failed;
    return a.test_acc > b.test_acc;
  });
  if (!results.empty()) {
    nlohmann::json summary{{"event", "grid_summary"},
                           {"arch", grid.arch},
                           {"runs", results.size()},
                           {"best", results.front().grid_key},
                           {"best_test_acc", results.front().test_acc}};
    append_ledger(ledger_path, summary);
  }
  return results;
}

}  // namespace mclab

#endif  // MCLAB_TRAINING_HPP
