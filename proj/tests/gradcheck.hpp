#ifndef MCLAB_TESTS_GRADCHECK_HPP
#define MCLAB_TESTS_GRADCHECK_HPP

// Finite-difference gradient oracle. Deliberately independent of the tape:
// it only calls the forward path, perturbing one element at a time, and runs
// in double precision with central differences of step 1e-3.

#include <cmath>
#include <functional>
#include <vector>

#include "mclab/rng.hpp"
#include "mclab/tensor.hpp"

namespace mclab::gradcheck {

constexpr double kStep = 1e-3;
constexpr double kTolerance = 1e-4;

/// Scalar-valued forward function of the checked tensors' current contents.
using ScalarFn = std::function<double()>;

struct Result {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_nonsmooth = 0;
};

inline double rel_err(double analytic, double numeric) {
  const double scale = std::max({1.0, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / scale;
}

/// Central-difference check of d(fn)/d(tensor) against analytic_grad.
/// When sample_limit > 0, a deterministic random subset of coordinates is
/// checked instead of all of them (used for large parameter tensors).
///
/// Central differences are only a derivative estimate where the function is
/// smooth; a perturbation window that straddles a relu kink or a max-pool
/// argmax switch produces a meaningless value. Such coordinates are detected
/// by re-estimating at half the step: smooth coordinates agree to O(step^2),
/// kink crossings disagree wildly and are excluded from the comparison.
inline Result check_tensor(DTensor& tensor, std::span<const double> analytic_grad,
                           const ScalarFn& fn, std::size_t sample_limit = 0,
                           std::uint64_t sample_seed = 7) {
  Result result;
  std::vector<std::size_t> coords;
  if (sample_limit == 0 || tensor.numel() <= sample_limit) {
    for (std::size_t i = 0; i < tensor.numel(); ++i) coords.push_back(i);
  } else {
    Rng rng(mix_seed({sample_seed, tensor.numel()}));
    for (std::size_t k = 0; k < sample_limit; ++k)
      coords.push_back(static_cast<std::size_t>(rng.next_below(tensor.numel())));
  }
  for (const std::size_t i : coords) {
    const double saved = tensor.data()[i];
    auto eval_at = [&](double v) {
      tensor.data()[i] = v;
      const double y = fn();
      tensor.data()[i] = saved;
      return y;
    };
    const double numeric =
        (eval_at(saved + kStep) - eval_at(saved - kStep)) / (2.0 * kStep);
    const double numeric_half =
        (eval_at(saved + kStep / 2) - eval_at(saved - kStep / 2)) / kStep;
    if (rel_err(numeric, numeric_half) > kTolerance / 4) {
      ++result.skipped_nonsmooth;
      continue;
    }
    result.max_rel_err = std::max(result.max_rel_err, rel_err(analytic_grad[i], numeric));
    ++result.checked;
  }
  return result;
}

/// Deterministic pseudo-random fill for test inputs.
inline DTensor random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0,
                             bool requires_grad = true) {
  Rng rng(seed);
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = rng.next_uniform(-scale, scale);
  return DTensor::from(std::move(shape), std::move(data), requires_grad);
}

/// Fixed projection weights that turn a tensor-valued op into a scalar.
inline std::vector<double> random_weights(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(n);
  for (auto& v : w) v = rng.next_uniform(-1.0, 1.0);
  return w;
}

inline double project(const DTensor& t, const std::vector<double>& w) {
  double acc = 0.0;
  for (std::size_t i = 0; i < t.numel(); ++i) acc += t.data()[i] * w[i];
  return acc;
}

}  // namespace mclab::gradcheck

#include "mclab/models.hpp"
#include "mclab/ops.hpp"

namespace mclab::gradcheck {

struct ArchResult {
  double max_rel_err = 0.0;
  std::string worst_tensor;
  std::size_t checked = 0;
};

/// End-to-end check of one architecture on a 2-sample micro-batch: the loss
/// gradient of every parameter tensor (a sampled subset of coordinates for
/// large tensors) against central finite differences in double precision.
/// Dropout runs in training mode with a fixed seed, so the masks are part of
/// the differentiated function.
inline ArchResult check_architecture(const ModelSpec& spec,
                                     std::size_t samples_per_tensor = 6) {
  auto net = build_model<double>(spec);

  Batch<double> batch;
  batch.batch = 2;
  Rng rng(mix_seed({spec.init_seed, 0xBA7C4ull}));
  if (is_token_arch(spec.arch)) {
    batch.seq_len = spec.opcode_length;
    for (int i = 0; i < 2 * spec.opcode_length; ++i)
      batch.tokens.push_back(static_cast<std::int32_t>(rng.next_below(spec.vocab_size)));
  } else {
    const int feat = (spec.arch == "cnn1d" || spec.arch == "cnn1d_refined")
                         ? spec.image_dim
                         : spec.image_dim * spec.image_dim;
    std::vector<double> x(2 * static_cast<std::size_t>(feat));
    for (auto& v : x) v = rng.next_double();
    batch.dense = DTensor::from({2, feat}, std::move(x));
  }
  batch.labels = {0, spec.num_classes > 1 ? 1 : 0};

  ForwardOptions opt;
  opt.training = true;
  opt.dropout_seed = 1234;

  auto forward_loss = [&]() {
    DTape tape;
    auto logits = net->forward(tape, batch, opt);
    return softmax_cross_entropy<double>(tape, logits, batch.labels).item();
  };

  DTape tape;
  auto logits = net->forward(tape, batch, opt);
  auto loss = softmax_cross_entropy<double>(tape, logits, batch.labels);
  for (auto& [name, t] : net->params().items()) t.zero_grad();
  tape.backward(loss);

  ArchResult out;
  for (auto& [name, t] : net->params().items()) {
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    const auto res =
        check_tensor(t, analytic, forward_loss, samples_per_tensor, hash_str(name));
    if (res.max_rel_err > out.max_rel_err) {
      out.max_rel_err = res.max_rel_err;
      out.worst_tensor = name;
    }
    out.checked += res.checked;
  }
  return out;
}

/// Checks one op: analytic gradient of project(op(inputs), w) via the tape
/// against central differences, for every input tensor.
template <typename Fn>
Result check_op(std::vector<DTensor> inputs, const Fn& op, std::uint64_t weight_seed) {
  DTape probe;
  auto probe_out = op(probe);
  const auto weights = random_weights(probe_out.numel(), weight_seed);

  DTape tape;
  auto out = op(tape);
  auto w = DTensor::from(out.shape(), std::vector<double>(weights.begin(), weights.end()));
  auto loss = sum(tape, mul(tape, out, w));
  for (auto& in : inputs) in.zero_grad();
  tape.backward(loss);

  ScalarFn forward = [&]() {
    DTape t;
    return project(op(t), weights);
  };
  Result total;
  for (auto& in : inputs) {
    std::vector<double> analytic(in.grad().begin(), in.grad().end());
    const auto r = check_tensor(in, analytic, forward);
    total.max_rel_err = std::max(total.max_rel_err, r.max_rel_err);
    total.checked += r.checked;
    total.skipped_nonsmooth += r.skipped_nonsmooth;
  }
  return total;
}

/// Every differentiable primitive against the finite-difference oracle on a
/// small randomized shape. Returns (name, result) pairs.
inline std::vector<std::pair<std::string, Result>> run_primitive_suite() {
  std::vector<std::pair<std::string, Result>> results;
  auto add_case = [&](const std::string& name, Result r) {
    results.emplace_back(name, r);
  };

  {
    auto a = random_tensor({3, 4}, 101), b = random_tensor({4, 5}, 102);
    add_case("matmul", check_op({a, b}, [a, b](DTape& t) { return matmul(t, a, b); }, 1));
  }
  {
    auto a = random_tensor({3, 4}, 103), b = random_tensor({3, 4}, 104);
    add_case("add", check_op({a, b}, [a, b](DTape& t) { return add(t, a, b); }, 2));
    add_case("mul", check_op({a, b}, [a, b](DTape& t) { return mul(t, a, b); }, 3));
    add_case("affine", check_op({a}, [a](DTape& t) { return affine(t, a, -1.0, 1.0); }, 4));
    add_case("relu", check_op({a}, [a](DTape& t) { return relu(t, a); }, 5));
    add_case("sigmoid", check_op({a}, [a](DTape& t) { return sigmoid(t, a); }, 6));
    add_case("tanh", check_op({a}, [a](DTape& t) { return tanh_op(t, a); }, 7));
    add_case("reshape", check_op({a}, [a](DTape& t) { return reshape(t, a, {4, 3}); }, 8));
    add_case("slice_cols", check_op({a}, [a](DTape& t) { return slice_cols(t, a, 1, 3); }, 9));
    add_case("sum", check_op({a}, [a](DTape& t) { return sum(t, a); }, 10));
    add_case("dropout",
             check_op({a}, [a](DTape& t) { return dropout(t, a, 0.4, true, 77); }, 11));
  }
  {
    auto x = random_tensor({3, 4}, 105), bias = random_tensor({4}, 106);
    add_case("add_rowwise",
             check_op({x, bias}, [x, bias](DTape& t) { return add_rowwise(t, x, bias); }, 12));
  }
  {
    auto a = random_tensor({2, 3}, 107), b = random_tensor({2, 2}, 108);
    add_case("concat_cols", check_op({a, b}, [a, b](DTape& t) {
               return concat_cols(t, std::vector<DTensor>{a, b});
             }, 13));
  }
  {
    auto x = random_tensor({2, 2, 5, 6}, 109);
    auto w = random_tensor({3, 2, 3, 3}, 110);
    auto b = random_tensor({3}, 111);
    add_case("conv2d", check_op({x, w, b}, [x, w, b](DTape& t) {
               return conv2d(t, x, w, b, 1, 1);
             }, 14));
    add_case("conv2d_strided", check_op({x, w, b}, [x, w, b](DTape& t) {
               return conv2d(t, x, w, b, 2, 2);
             }, 15));
  }
  {
    auto x = random_tensor({2, 3, 10}, 112);
    auto w = random_tensor({4, 3, 3}, 113);
    auto b = random_tensor({4}, 114);
    add_case("conv1d", check_op({x, w, b}, [x, w, b](DTape& t) {
               return conv1d(t, x, w, b, 2, 1);
             }, 16));
  }
  {
    auto x = random_tensor({2, 2, 9}, 115);
    add_case("maxpool1d",
             check_op({x}, [x](DTape& t) { return maxpool1d(t, x, 2, 2); }, 17));
    auto y = random_tensor({1, 2, 6, 6}, 116);
    add_case("maxpool2d",
             check_op({y}, [y](DTape& t) { return maxpool2d(t, y, 2, 2); }, 18));
  }
  {
    auto table = random_tensor({5, 3}, 117);
    const std::vector<std::int32_t> ids = {0, 2, 2, 4, 1};
    add_case("embedding_lookup", check_op({table}, [table, ids](DTape& t) {
               return embedding_lookup<double>(t, table, ids);
             }, 19));
  }
  {
    auto logits = random_tensor({3, 4}, 118, 2.0);
    const std::vector<std::int32_t> labels = {1, 0, 3};
    DTape tape;
    auto loss = softmax_cross_entropy<double>(tape, logits, labels);
    tape.backward(loss);
    std::vector<double> analytic(logits.grad().begin(), logits.grad().end());
    ScalarFn forward = [&]() {
      DTape t;
      return softmax_cross_entropy<double>(t, logits, labels).item();
    };
    add_case("softmax_cross_entropy", check_tensor(logits, analytic, forward));
  }
  return results;
}

/// Micro-scale specs for the nine architectures; tiny dims keep the
/// finite-difference sweeps fast while exercising every code path
/// (multi-layer dropout, bi-direction, both stack orders).
inline std::vector<ModelSpec> micro_arch_specs() {
  std::vector<ModelSpec> specs;
  auto base = [](const std::string& arch) {
    ModelSpec s;
    s.arch = arch;
    s.num_classes = 4;
    s.init_seed = 5;
    s.vocab_size = 12;
    s.opcode_length = 6;
    s.embedding_dim = 5;
    s.hidden_dim = 7;
    s.num_layers = 1;
    return s;
  };
  {
    auto s = base("mlp");
    s.image_dim = 8;
    specs.push_back(s);
  }
  {
    auto s = base("cnn2d");
    s.image_dim = 12;
    specs.push_back(s);
  }
  {
    auto s = base("cnn1d");
    s.image_dim = 32;
    specs.push_back(s);
  }
  {
    auto s = base("cnn1d_refined");
    s.image_dim = 256;
    s.conv1_out = 8;
    s.conv1_kernel = 16;
    s.conv1_stride = 8;
    s.conv2_out = 4;
    s.conv2_kernel = 8;
    s.conv2_stride = 2;
    specs.push_back(s);
  }
  {
    auto s = base("cnn_opcode");
    s.opcode_length = 30;
    s.num_filters = 2;
    s.filter_sizes = {3, 5};
    specs.push_back(s);
  }
  {
    auto s = base("rnn");
    specs.push_back(s);
  }
  {
    auto s = base("lstm");
    s.num_layers = 2;  // exercises inter-layer dropout
    specs.push_back(s);
  }
  {
    auto s = base("gru");
    s.bidirectional = true;
    specs.push_back(s);
  }
  {
    auto s = base("stacked");
    s.lg = true;
    specs.push_back(s);
  }
  return specs;
}

}  // namespace mclab::gradcheck

#endif  // MCLAB_TESTS_GRADCHECK_HPP
