#ifndef MCLAB_MODELS_HPP
#define MCLAB_MODELS_HPP

#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mclab/common.hpp"
#include "mclab/ops.hpp"
#include "mclab/rng.hpp"
#include "mclab/tensor.hpp"

namespace mclab {

/// One mini-batch of features: either a dense [B, feat] block (image models)
/// or row-major token ids [B, seq_len] (opcode models).
template <typename T>
struct Batch {
  TensorBase<T> dense;
  std::vector<std::int32_t> tokens;
  int batch = 0;
  int seq_len = 0;
  std::vector<std::int32_t> labels;
};

struct ForwardOptions {
  bool training = false;
  std::uint64_t dropout_seed = 0;
};

/// Architecture + hyperparameters, serializable into checkpoints and run logs.
/// Field applicability depends on arch; unused fields keep their defaults.
struct ModelSpec {
  std::string arch;  // mlp|cnn2d|cnn1d|cnn1d_refined|cnn_opcode|rnn|lstm|gru|stacked
  int num_classes = 20;
  std::uint64_t init_seed = 1;

  int image_dim = 128;  // square dim for mlp/cnn2d, flat length for cnn1d*

  // cnn1d
  bool cnn1d_pool = true;

  // cnn1d_refined
  int conv1_out = 128, conv1_kernel = 16, conv1_stride = 8;
  int conv2_out = 32, conv2_kernel = 8, conv2_stride = 2;

  // opcode models
  int vocab_size = 0;
  int opcode_length = 500;
  int embedding_dim = 256;

  // cnn_opcode
  int num_filters = 9;
  std::vector<int> filter_sizes = {12, 24};

  // recurrent
  int hidden_dim = 256;
  int num_layers = 1;
  bool bidirectional = false;
  bool lg = true;  // stacked order: true = LSTM feeds GRU
  double dropout_p = 0.3;
};

inline void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = nlohmann::json{{"arch", s.arch},
                     {"num_classes", s.num_classes},
                     {"init_seed", s.init_seed},
                     {"image_dim", s.image_dim},
                     {"cnn1d_pool", s.cnn1d_pool},
                     {"conv1_out", s.conv1_out},
                     {"conv1_kernel", s.conv1_kernel},
                     {"conv1_stride", s.conv1_stride},
                     {"conv2_out", s.conv2_out},
                     {"conv2_kernel", s.conv2_kernel},
                     {"conv2_stride", s.conv2_stride},
                     {"vocab_size", s.vocab_size},
                     {"opcode_length", s.opcode_length},
                     {"embedding_dim", s.embedding_dim},
                     {"num_filters", s.num_filters},
                     {"filter_sizes", s.filter_sizes},
                     {"hidden_dim", s.hidden_dim},
                     {"num_layers", s.num_layers},
                     {"directional", s.bidirectional ? "bi" : "uni"},
                     {"LG", s.lg},
                     {"dropout_p", s.dropout_p}};
}

inline void from_json(const nlohmann::json& j, ModelSpec& s) {
  j.at("arch").get_to(s.arch);
  j.at("num_classes").get_to(s.num_classes);
  j.at("init_seed").get_to(s.init_seed);
  j.at("image_dim").get_to(s.image_dim);
  j.at("cnn1d_pool").get_to(s.cnn1d_pool);
  j.at("conv1_out").get_to(s.conv1_out);
  j.at("conv1_kernel").get_to(s.conv1_kernel);
  j.at("conv1_stride").get_to(s.conv1_stride);
  j.at("conv2_out").get_to(s.conv2_out);
  j.at("conv2_kernel").get_to(s.conv2_kernel);
  j.at("conv2_stride").get_to(s.conv2_stride);
  j.at("vocab_size").get_to(s.vocab_size);
  j.at("opcode_length").get_to(s.opcode_length);
  j.at("embedding_dim").get_to(s.embedding_dim);
  j.at("num_filters").get_to(s.num_filters);
  j.at("filter_sizes").get_to(s.filter_sizes);
  j.at("hidden_dim").get_to(s.hidden_dim);
  j.at("num_layers").get_to(s.num_layers);
  s.bidirectional = j.at("directional").get<std::string>() == "bi";
  j.at("LG").get_to(s.lg);
  j.at("dropout_p").get_to(s.dropout_p);
}

/// Named trainable tensors; registration order is the checkpoint order.
template <typename T>
class ParameterStore {
 public:
  void add(const std::string& name, TensorBase<T> tensor) {
    if (index_.count(name)) throw DataError("parameter registered twice: " + name);
    index_[name] = items_.size();
    items_.emplace_back(name, std::move(tensor));
  }

  TensorBase<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("unknown parameter: " + name);
    return items_[it->second].second;
  }

  const std::vector<std::pair<std::string, TensorBase<T>>>& items() const { return items_; }
  std::vector<std::pair<std::string, TensorBase<T>>>& items() { return items_; }

  std::size_t total_numel() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
  }

  void zero_grads() {
    for (auto& [name, t] : items_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, TensorBase<T>>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
class Network {
 public:
  explicit Network(ModelSpec spec) : spec_(std::move(spec)) {}
  virtual ~Network() = default;

  /// Produces logits [B, num_classes].
  virtual TensorBase<T> forward(TapeBase<T>& tape, const Batch<T>& batch,
                                const ForwardOptions& opt) = 0;

  const ModelSpec& spec() const { return spec_; }
  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }

 protected:
  /// Uniform fan-in init: U(-sqrt(1/fan_in), +sqrt(1/fan_in)), seeded per name.
  TensorBase<T> make_param(const std::string& name, Shape shape, std::size_t fan_in) {
    Rng rng(mix_seed({spec_.init_seed, hash_str(name)}));
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in ? fan_in : 1));
    std::vector<T> data(shape_numel(shape));
    for (auto& v : data) v = static_cast<T>(rng.next_uniform(-bound, bound));
    auto t = TensorBase<T>::from(std::move(shape), std::move(data), true);
    params_.add(name, t);
    return t;
  }

  void check_dense(const Batch<T>& batch, int expect_feat) const {
    if (!batch.dense.defined() || batch.dense.rank() != 2)
      throw ShapeError(spec_.arch + " expects dense [B,feat] input");
    if (batch.dense.dim(1) != expect_feat)
      throw ShapeError(strf("%s expects %d features, got %d", spec_.arch.c_str(),
                            expect_feat, batch.dense.dim(1)));
  }

  void check_tokens(const Batch<T>& batch) const {
    if (batch.tokens.empty() || batch.seq_len <= 0 ||
        batch.tokens.size() != static_cast<std::size_t>(batch.batch) * batch.seq_len)
      throw ShapeError(spec_.arch + " expects token [B,seq_len] input");
  }

  ModelSpec spec_;
  ParameterStore<T> params_;
};

// ---------------------------------------------------------------------------
// Feed-forward image models

template <typename T>
class MlpNet : public Network<T> {
 public:
  explicit MlpNet(ModelSpec spec) : Network<T>(std::move(spec)) {
    const auto& s = this->spec_;
    if (s.image_dim <= 0) throw ShapeError("mlp image_dim must be positive");
    const int in = s.image_dim * s.image_dim;
    const int widths[] = {in, 512, 256, 128, 64, s.num_classes};
    for (int l = 0; l < 5; ++l) {
      this->make_param(strf("fc%d.w", l + 1), {widths[l], widths[l + 1]}, widths[l]);
      this->make_param(strf("fc%d.b", l + 1), {widths[l + 1]}, widths[l]);
    }
  }

  TensorBase<T> forward(TapeBase<T>& tape, const Batch<T>& batch,
                        const ForwardOptions&) override {
    const auto& s = this->spec_;
    this->check_dense(batch, s.image_dim * s.image_dim);
    auto h = batch.dense;
    for (int l = 1; l <= 5; ++l) {
      h = add_rowwise(tape, matmul(tape, h, this->params_.get(strf("fc%d.w", l))),
                      this->params_.get(strf("fc%d.b", l)));
      if (l < 5) h = relu(tape, h);
    }
    return h;
  }
};

/// conv(1->12,k3,p2,s1) / pool2 / conv(12->16,k3,p2,s1) / pool2 / 120 / 90 / C
template <typename T>
class Cnn2dNet : public Network<T> {
 public:
  explicit Cnn2dNet(ModelSpec spec) : Network<T>(std::move(spec)) {
    const auto& s = this->spec_;
    const int c1 = detail::conv_out_dim(s.image_dim, 3, 2, 1);
    const int p1 = (c1 - 2) / 2 + 1;
    const int c2 = detail::conv_out_dim(p1, 3, 2, 1);
    const int p2 = (c2 - 2) / 2 + 1;
    if (s.image_dim <= 0 || p2 <= 0)
      throw ShapeError(strf("cnn2d image_dim %d leaves no spatial extent", s.image_dim));
    flat_ = 16 * p2 * p2;
    this->make_param("conv1.w", {12, 1, 3, 3}, 1 * 3 * 3);
    this->make_param("conv1.b", {12}, 1 * 3 * 3);
    this->make_param("conv2.w", {16, 12, 3, 3}, 12 * 3 * 3);
    this->make_param("conv2.b", {16}, 12 * 3 * 3);
    this->make_param("fc1.w", {flat_, 120}, flat_);
    this->make_param("fc1.b", {120}, flat_);
    this->make_param("fc2.w", {120, 90}, 120);
    this->make_param("fc2.b", {90}, 120);
    this->make_param("out.w", {90, this->spec_.num_classes}, 90);
    this->make_param("out.b", {this->spec_.num_classes}, 90);
  }

  int flatten_width() const { return flat_; }

  TensorBase<T> forward(TapeBase<T>& tape, const Batch<T>& batch,
                        const ForwardOptions&) override {
    const auto& s = this->spec_;
    this->check_dense(batch, s.image_dim * s.image_dim);
    const int b = batch.dense.dim(0);
    auto x = reshape(tape, batch.dense, {b, 1, s.image_dim, s.image_dim});
    x = maxpool2d(tape, relu(tape, conv2d(tape, x, this->params_.get("conv1.w"),
                                          this->params_.get("conv1.b"), 1, 2)), 2, 2);
    x = maxpool2d(tape, relu(tape, conv2d(tape, x, this->params_.get("conv2.w"),
                                          this->params_.get("conv2.b"), 1, 2)), 2, 2);
    x = reshape(tape, x, {b, flat_});
    x = relu(tape, add_rowwise(tape, matmul(tape, x, this->params_.get("fc1.w")),
                               this->params_.get("fc1.b")));
    x = relu(tape, add_rowwise(tape, matmul(tape, x, this->params_.get("fc2.w")),
                               this->params_.get("fc2.b")));
    return add_rowwise(tape, matmul(tape, x, this->params_.get("out.w")),
                       this->params_.get("out.b"));
  }

 private:
  int flat_ = 0;
};

/// conv1d(1->28,k3,p0) / pool2 / conv1d(28->16,k3,p0) / pool2 / 120 / 90 / C.
/// Pooling can be switched off (cnn1d_pool).
template <typename T>
class Cnn1dNet : public Network<T> {
 public:
  explicit Cnn1dNet(ModelSpec spec) : Network<T>(std::move(spec)) {
    const auto& s = this->spec_;
    int len = detail::conv_out_dim(s.image_dim, 3, 0, 1);
    if (s.cnn1d_pool) len = (len - 2) / 2 + 1;
    len = detail::conv_out_dim(len, 3, 0, 1);
    if (s.cnn1d_pool) len = (len - 2) / 2 + 1;
    if (s.image_dim <= 0 || len <= 0)
      throw ShapeError(strf("cnn1d image_dim %d leaves no length", s.image_dim));
    flat_ = 16 * len;
    this->make_param("conv1.w", {28, 1, 3}, 1 * 3);
    this->make_param("conv1.b", {28}, 1 * 3);
    this->make_param("conv2.w", {16, 28, 3}, 28 * 3);
    this->make_param("conv2.b", {16}, 28 * 3);
    this->make_param("fc1.w", {flat_, 120}, flat_);
    this->make_param("fc1.b", {120}, flat_);
    this->make_param("fc2.w", {120, 90}, 120);
    this->make_param("fc2.b", {90}, 120);
    this->make_param("out.w", {90, this->spec_.num_classes}, 90);
    this->make_param("out.b", {this->spec_.num_classes}, 90);
  }

  int flatten_width() const { return flat_; }

  TensorBase<T> forward(TapeBase<T>& tape, const Batch<T>& batch,
                        const ForwardOptions&) override {
    const auto& s = this->spec_;
    this->check_dense(batch, s.image_dim);
    const int b = batch.dense.dim(0);
    auto x = reshape(tape, batch.dense, {b, 1, s.image_dim});
    x = relu(tape, conv1d(tape, x, this->params_.get("conv1.w"),
                          this->params_.get("conv1.b"), 1, 0));
    if (s.cnn1d_pool) x = maxpool1d(tape, x, 2, 2);
    x = relu(tape, conv1d(tape, x, this->params_.get("conv2.w"),
                          this->params_.get("conv2.b"), 1, 0));
    if (s.cnn1d_pool) x = maxpool1d(tape, x, 2, 2);
    x = reshape(tape, x, {b, flat_});
    x = relu(tape, add_rowwise(tape, matmul(tape, x, this->params_.get("fc1.w")),
                               this->params_.get("fc1.b")));
    x = relu(tape, add_rowwise(tape, matmul(tape, x, this->params_.get("fc2.w")),
                               this->params_.get("fc2.b")));
    return add_rowwise(tape, matmul(tape, x, this->params_.get("out.w")),
                       this->params_.get("out.b"));
  }

 private:
  int flat_ = 0;
};

/// Two strided conv1d stages straight into the 120/90/C head.
template <typename T>
class Cnn1dRefinedNet : public Network<T> {
 public:
  explicit Cnn1dRefinedNet(ModelSpec spec) : Network<T>(std::move(spec)) {
    const auto& s = this->spec_;
    len1_ = detail::conv_out_dim(s.image_dim, s.conv1_kernel, 0, s.conv1_stride);
    len2_ = detail::conv_out_dim(len1_, s.conv2_kernel, 0, s.conv2_stride);
    if (len1_ <= 0 || len2_ <= 0)
      throw ShapeError(strf("cnn1d_refined derives non-positive lengths %d -> %d",
                            len1_, len2_));
    flat_ = s.conv2_out * len2_;
    this->make_param("conv1.w", {s.conv1_out, 1, s.conv1_kernel}, s.conv1_kernel);
    this->make_param("conv1.b", {s.conv1_out}, s.conv1_kernel);
    this->make_param("conv2.w", {s.conv2_out, s.conv1_out, s.conv2_kernel},
                     s.conv1_out * s.conv2_kernel);
    this->make_param("conv2.b", {s.conv2_out}, s.conv1_out * s.conv2_kernel);
    this->make_param("fc1.w", {flat_, 120}, flat_);
    this->make_param("fc1.b", {120}, flat_);
    this->make_param("fc2.w", {120, 90}, 120);
    this->make_param("fc2.b", {90}, 120);
    this->make_param("out.w", {90, this->spec_.num_classes}, 90);
    this->make_param("out.b", {this->spec_.num_classes}, 90);
  }

  std::pair<int, int> stage_lengths() const { return {len1_, len2_}; }
  int flatten_width() const { return flat_; }

  TensorBase<T> forward(TapeBase<T>& tape, const Batch<T>& batch,
                        const ForwardOptions&) override {
    const auto& s = this->spec_;
    this->check_dense(batch, s.image_dim);
    const int b = batch.dense.dim(0);
    auto x = reshape(tape, batch.dense, {b, 1, s.image_dim});
    x = relu(tape, conv1d(tape, x, this->params_.get("conv1.w"),
                          this->params_.get("conv1.b"), s.conv1_stride, 0));
    x = relu(tape, conv1d(tape, x, this->params_.get("conv2.w"),
                          this->params_.get("conv2.b"), s.conv2_stride, 0));
    x = reshape(tape, x, {b, flat_});
    x = relu(tape, add_rowwise(tape, matmul(tape, x, this->params_.get("fc1.w")),
                               this->params_.get("fc1.b")));
    x = relu(tape, add_rowwise(tape, matmul(tape, x, this->params_.get("fc2.w")),
                               this->params_.get("fc2.b")));
    return add_rowwise(tape, matmul(tape, x, this->params_.get("out.w")),
                       this->params_.get("out.b"));
  }

 private:
  int len1_ = 0, len2_ = 0, flat_ = 0;
};

/// Text-CNN over embedded opcode ids: the [N,d] embedding is a one-channel
/// image; each filter height h gets num_filters h-by-d kernels, relu, and
/// max-over-time pooling; pooled features concatenate into one FC classifier.
template <typename T>
class CnnOpcodeNet : public Network<T> {
 public:
  explicit CnnOpcodeNet(ModelSpec spec) : Network<T>(std::move(spec)) {
    const auto& s = this->spec_;
    if (s.vocab_size < 2) throw ShapeError("cnn_opcode requires vocab_size >= 2");
    for (int h : s.filter_sizes)
      if (h > s.opcode_length)
        throw ShapeError(strf("filter height %d exceeds opcode_length %d", h,
                              s.opcode_length));
    this->make_param("embed", {s.vocab_size, s.embedding_dim}, s.embedding_dim);
    for (std::size_t i = 0; i < s.filter_sizes.size(); ++i) {
      const int h = s.filter_sizes[i];
      this->make_param(strf("conv%zu.w", i), {s.num_filters, 1, h, s.embedding_dim},
                       h * s.embedding_dim);
      this->make_param(strf("conv%zu.b", i), {s.num_filters}, h * s.embedding_dim);
    }
    const int feat = s.num_filters * static_cast<int>(s.filter_sizes.size());
    this->make_param("out.w", {feat, s.num_classes}, feat);
    this->make_param("out.b", {s.num_classes}, feat);
  }

  TensorBase<T> forward(TapeBase<T>& tape, const Batch<T>& batch,
                        const ForwardOptions&) override {
    const auto& s = this->spec_;
    this->check_tokens(batch);
    if (batch.seq_len != s.opcode_length)
      throw ShapeError(strf("cnn_opcode expects %d tokens per sample, got %d",
                            s.opcode_length, batch.seq_len));
    const int b = batch.batch;
    auto emb = embedding_lookup<T>(tape, this->params_.get("embed"), batch.tokens);
    auto img = reshape(tape, emb, {b, 1, s.opcode_length, s.embedding_dim});
    std::vector<TensorBase<T>> pooled;
    for (std::size_t i = 0; i < s.filter_sizes.size(); ++i) {
      const int h = s.filter_sizes[i];
      auto c = relu(tape, conv2d(tape, img, this->params_.get(strf("conv%zu.w", i)),
                                 this->params_.get(strf("conv%zu.b", i)), 1, 0));
      const int len = s.opcode_length - h + 1;
      auto flat = reshape(tape, c, {b, s.num_filters, len});
      auto top = maxpool1d(tape, flat, len, len);
      pooled.push_back(reshape(tape, top, {b, s.num_filters}));
    }
    auto feat = concat_cols(tape, pooled);
    return add_rowwise(tape, matmul(tape, feat, this->params_.get("out.w")),
                       this->params_.get("out.b"));
  }
};

// ---------------------------------------------------------------------------
// Recurrent models

namespace detail {

enum class CellKind { vanilla, lstm, gru };

inline int gate_count(CellKind k) {
  switch (k) {
    case CellKind::vanilla: return 1;
    case CellKind::lstm: return 4;
    case CellKind::gru: return 3;
  }
  return 1;
}

inline const char* cell_name(CellKind k) {
  switch (k) {
    case CellKind::vanilla: return "rnn";
    case CellKind::lstm: return "lstm";
    case CellKind::gru: return "gru";
  }
  return "rnn";
}

}  // namespace detail

/// One direction of one recurrent layer with fused gate weights. The GRU keeps
/// a separate hidden weight for its candidate gate because the reset gate
/// modulates the hidden state before that product.
template <typename T>
struct RecurrentLayerParams {
  TensorBase<T> w_ih;     // [in, G*h]
  TensorBase<T> w_hh;     // [h, G*h] (vanilla/lstm) or [h, 2h] (gru: z,r)
  TensorBase<T> w_hh_n;   // [h, h] gru candidate only
  TensorBase<T> bias;     // [G*h]
};

template <typename T>
using ParamFactory =
    std::function<TensorBase<T>(const std::string&, Shape, std::size_t)>;

template <typename T>
class RecurrentStack {
 public:
  RecurrentStack() = default;

  RecurrentStack(const ParamFactory<T>& make, const std::string& prefix,
                 detail::CellKind kind, int input_dim, int hidden, int layers,
                 bool bidirectional)
      : kind_(kind), hidden_(hidden), layers_(layers), bidirectional_(bidirectional) {
    const int g = detail::gate_count(kind);
    for (int l = 0; l < layers; ++l) {
      const int in = l == 0 ? input_dim : hidden * dirs();
      for (int d = 0; d < dirs(); ++d) {
        RecurrentLayerParams<T> p;
        const std::string base = strf("%s.l%d.%s", prefix.c_str(), l, d ? "b" : "f");
        p.w_ih = make(base + ".w_ih", {in, g * hidden}, in);
        if (kind == detail::CellKind::gru) {
          p.w_hh = make(base + ".w_hh_zr", {hidden, 2 * hidden}, hidden);
          p.w_hh_n = make(base + ".w_hh_n", {hidden, hidden}, hidden);
        } else {
          p.w_hh = make(base + ".w_hh", {hidden, g * hidden}, hidden);
        }
        p.bias = make(base + ".b", {g * hidden}, in + hidden);
        layers_params_.push_back(std::move(p));
      }
    }
  }

  int dirs() const { return bidirectional_ ? 2 : 1; }
  int output_dim() const { return hidden_ * dirs(); }

  /// Runs the stack over a per-timestep input sequence; fills final with the
  /// last time-step hidden state(s), concatenated over directions.
  std::vector<TensorBase<T>> run(TapeBase<T>& tape,
                                 const std::vector<TensorBase<T>>& inputs,
                                 double dropout_p, const ForwardOptions& opt,
                                 std::uint64_t stream, TensorBase<T>& final) {
    std::vector<TensorBase<T>> seq = inputs;
    const int steps = static_cast<int>(inputs.size());
    const int b = inputs[0].dim(0);
    for (int l = 0; l < layers_; ++l) {
      if (l > 0 && layers_ > 1 && dropout_p > 0.0) {
        for (int t = 0; t < steps; ++t)
          seq[t] = dropout(tape, seq[t], dropout_p, opt.training,
                           mix_seed({opt.dropout_seed, stream,
                                     static_cast<std::uint64_t>(l),
                                     static_cast<std::uint64_t>(t)}));
      }
      std::vector<TensorBase<T>> fwd_out, bwd_out;
      std::vector<TensorBase<T>> finals;
      for (int d = 0; d < dirs(); ++d) {
        const auto& p = layers_params_[static_cast<std::size_t>(l) * dirs() + d];
        auto h = TensorBase<T>::zeros({b, hidden_});
        auto c = TensorBase<T>::zeros({b, hidden_});
        auto& out = d == 0 ? fwd_out : bwd_out;
        out.resize(steps);
        for (int step = 0; step < steps; ++step) {
          const int t = d == 0 ? step : steps - 1 - step;
          std::tie(h, c) = cell_step(tape, p, seq[t], h, c);
          out[t] = h;
        }
        finals.push_back(h);
      }
      if (bidirectional_) {
        std::vector<TensorBase<T>> joined(steps);
        for (int t = 0; t < steps; ++t)
          joined[t] = concat_cols(tape, {fwd_out[t], bwd_out[t]});
        seq = std::move(joined);
        final = concat_cols(tape, finals);
      } else {
        seq = std::move(fwd_out);
        final = finals[0];
      }
    }
    return seq;
  }

 private:
  std::pair<TensorBase<T>, TensorBase<T>> cell_step(TapeBase<T>& tape,
                                                    const RecurrentLayerParams<T>& p,
                                                    TensorBase<T> x, TensorBase<T> h,
                                                    TensorBase<T> c) {
    const int H = hidden_;
    switch (kind_) {
      case detail::CellKind::vanilla: {
        auto pre = add_rowwise(tape, add(tape, matmul(tape, x, p.w_ih),
                                         matmul(tape, h, p.w_hh)), p.bias);
        return {tanh_op(tape, pre), c};
      }
      case detail::CellKind::lstm: {
        auto pre = add_rowwise(tape, add(tape, matmul(tape, x, p.w_ih),
                                         matmul(tape, h, p.w_hh)), p.bias);
        auto i = sigmoid(tape, slice_cols(tape, pre, 0, H));
        auto f = sigmoid(tape, slice_cols(tape, pre, H, 2 * H));
        auto g = tanh_op(tape, slice_cols(tape, pre, 2 * H, 3 * H));
        auto o = sigmoid(tape, slice_cols(tape, pre, 3 * H, 4 * H));
        auto c_next = add(tape, mul(tape, f, c), mul(tape, i, g));
        auto h_next = mul(tape, o, tanh_op(tape, c_next));
        return {h_next, c_next};
      }
      case detail::CellKind::gru: {
        auto xg = add_rowwise(tape, matmul(tape, x, p.w_ih), p.bias);  // [B,3H]: z,r,n
        auto hg = matmul(tape, h, p.w_hh);                             // [B,2H]: z,r
        auto z = sigmoid(tape, add(tape, slice_cols(tape, xg, 0, H),
                                   slice_cols(tape, hg, 0, H)));
        auto r = sigmoid(tape, add(tape, slice_cols(tape, xg, H, 2 * H),
                                   slice_cols(tape, hg, H, 2 * H)));
        auto n = tanh_op(tape, add(tape, slice_cols(tape, xg, 2 * H, 3 * H),
                                   matmul(tape, mul(tape, r, h), p.w_hh_n)));
        // h' = (1-z)*n + z*h
        auto h_next = add(tape, mul(tape, affine(tape, z, T(-1), T(1)), n),
                          mul(tape, z, h));
        return {h_next, c};
      }
    }
    throw Error("unreachable cell kind");
  }

  detail::CellKind kind_ = detail::CellKind::vanilla;
  int hidden_ = 0;
  int layers_ = 0;
  bool bidirectional_ = false;
  std::vector<RecurrentLayerParams<T>> layers_params_;
};

template <typename T>
class RecurrentNet : public Network<T> {
 public:
  RecurrentNet(ModelSpec spec, detail::CellKind kind) : Network<T>(std::move(spec)) {
    const auto& s = this->spec_;
    if (s.vocab_size < 2) throw ShapeError("recurrent nets require vocab_size >= 2");
    if (s.hidden_dim <= 0 || s.embedding_dim <= 0 || s.num_layers <= 0)
      throw ShapeError("recurrent dims must be positive");
    this->make_param("embed", {s.vocab_size, s.embedding_dim}, s.embedding_dim);
    ParamFactory<T> factory = [this](const std::string& n, Shape sh, std::size_t f) {
      return this->make_param(n, std::move(sh), f);
    };
    stack_ = RecurrentStack<T>(factory, detail::cell_name(kind), kind, s.embedding_dim,
                               s.hidden_dim, s.num_layers, s.bidirectional);
    const int feat = stack_.output_dim();
    this->make_param("out.w", {feat, s.num_classes}, feat);
    this->make_param("out.b", {s.num_classes}, feat);
  }

  TensorBase<T> forward(TapeBase<T>& tape, const Batch<T>& batch,
                        const ForwardOptions& opt) override {
    const auto& s = this->spec_;
    this->check_tokens(batch);
    auto inputs = embed_steps(tape, this->params_.get("embed"), batch);
    TensorBase<T> final;
    stack_.run(tape, inputs, s.dropout_p, opt, 1, final);
    return add_rowwise(tape, matmul(tape, final, this->params_.get("out.w")),
                       this->params_.get("out.b"));
  }

  static std::vector<TensorBase<T>> embed_steps(TapeBase<T>& tape, TensorBase<T> table,
                                                const Batch<T>& batch) {
    std::vector<TensorBase<T>> inputs(batch.seq_len);
    std::vector<std::int32_t> col(batch.batch);
    for (int t = 0; t < batch.seq_len; ++t) {
      for (int b = 0; b < batch.batch; ++b)
        col[b] = batch.tokens[static_cast<std::size_t>(b) * batch.seq_len + t];
      inputs[t] = embedding_lookup<T>(tape, table, col);
    }
    return inputs;
  }

 private:
  RecurrentStack<T> stack_;
};

/// LSTM and GRU stacks in series; lg=true runs the LSTM first, lg=false the GRU.
template <typename T>
class StackedNet : public Network<T> {
 public:
  explicit StackedNet(ModelSpec spec) : Network<T>(std::move(spec)) {
    const auto& s = this->spec_;
    if (s.vocab_size < 2) throw ShapeError("stacked net requires vocab_size >= 2");
    this->make_param("embed", {s.vocab_size, s.embedding_dim}, s.embedding_dim);
    ParamFactory<T> factory = [this](const std::string& n, Shape sh, std::size_t f) {
      return this->make_param(n, std::move(sh), f);
    };
    lstm_ = RecurrentStack<T>(factory, "lstm", detail::CellKind::lstm,
                              s.lg ? s.embedding_dim : hidden_out(), s.hidden_dim,
                              s.num_layers, s.bidirectional);
    gru_ = RecurrentStack<T>(factory, "gru", detail::CellKind::gru,
                             s.lg ? hidden_out() : s.embedding_dim, s.hidden_dim,
                             s.num_layers, s.bidirectional);
    const int feat = hidden_out();
    this->make_param("out.w", {feat, s.num_classes}, feat);
    this->make_param("out.b", {s.num_classes}, feat);
  }

  TensorBase<T> forward(TapeBase<T>& tape, const Batch<T>& batch,
                        const ForwardOptions& opt) override {
    const auto& s = this->spec_;
    this->check_tokens(batch);
    auto inputs = RecurrentNet<T>::embed_steps(tape, this->params_.get("embed"), batch);
    TensorBase<T> final;
    if (s.lg) {
      auto mid = lstm_.run(tape, inputs, s.dropout_p, opt, 1, final);
      gru_.run(tape, mid, s.dropout_p, opt, 2, final);
    } else {
      auto mid = gru_.run(tape, inputs, s.dropout_p, opt, 1, final);
      lstm_.run(tape, mid, s.dropout_p, opt, 2, final);
    }
    return add_rowwise(tape, matmul(tape, final, this->params_.get("out.w")),
                       this->params_.get("out.b"));
  }

 private:
  int hidden_out() const {
    return this->spec_.hidden_dim * (this->spec_.bidirectional ? 2 : 1);
  }
  RecurrentStack<T> lstm_, gru_;
};

// ---------------------------------------------------------------------------

template <typename T>
std::unique_ptr<Network<T>> build_model(const ModelSpec& spec) {
  if (spec.num_classes <= 0) throw ShapeError("num_classes must be positive");
  if (spec.arch == "mlp") return std::make_unique<MlpNet<T>>(spec);
  if (spec.arch == "cnn2d") return std::make_unique<Cnn2dNet<T>>(spec);
  if (spec.arch == "cnn1d") return std::make_unique<Cnn1dNet<T>>(spec);
  if (spec.arch == "cnn1d_refined") return std::make_unique<Cnn1dRefinedNet<T>>(spec);
  if (spec.arch == "cnn_opcode") return std::make_unique<CnnOpcodeNet<T>>(spec);
  if (spec.arch == "rnn") return std::make_unique<RecurrentNet<T>>(spec, detail::CellKind::vanilla);
  if (spec.arch == "lstm") return std::make_unique<RecurrentNet<T>>(spec, detail::CellKind::lstm);
  if (spec.arch == "gru") return std::make_unique<RecurrentNet<T>>(spec, detail::CellKind::gru);
  if (spec.arch == "stacked") return std::make_unique<StackedNet<T>>(spec);
  throw DataError("unknown architecture: " + spec.arch);
}

inline bool is_token_arch(const std::string& arch) {
  return arch == "cnn_opcode" || arch == "rnn" || arch == "lstm" || arch == "gru" ||
         arch == "stacked";
}

/// Parameters belonging to recurrent layers (excludes embedding and the
/// classifier head); matches the closed-form gate-count formulas.
template <typename T>
std::size_t recurrent_param_count(const Network<T>& net) {
  std::size_t n = 0;
  for (const auto& [name, t] : net.params().items())
    if (name != "embed" && name.rfind("out.", 0) != 0) n += t.numel();
  return n;
}

// ---------------------------------------------------------------------------
// Checkpoints: one JSON header line {arch, config, num_classes, seed, tensors}
// followed by the raw little-endian f32 payloads in index order.

namespace detail {

inline void append_f32_le(std::string& out, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  out.push_back(static_cast<char>(bits & 0xff));
  out.push_back(static_cast<char>((bits >> 8) & 0xff));
  out.push_back(static_cast<char>((bits >> 16) & 0xff));
  out.push_back(static_cast<char>((bits >> 24) & 0xff));
}

inline float read_f32_le(const unsigned char* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) |
                             (static_cast<std::uint32_t>(p[1]) << 8) |
                             (static_cast<std::uint32_t>(p[2]) << 16) |
                             (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

/// Single-tensor file: one JSON header line {name, shape, dtype:"f32"}
/// followed by the little-endian f32 payload.
template <typename T>
void write_tensor_file(const fs::path& path, const std::string& name,
                       const TensorBase<T>& tensor) {
  nlohmann::json header{{"name", name}, {"shape", tensor.shape()}, {"dtype", "f32"}};
  std::string out = header.dump();
  out += '\n';
  for (const T v : tensor.data()) detail::append_f32_le(out, static_cast<float>(v));
  write_file_text(path, out);
}

template <typename T>
std::pair<std::string, TensorBase<T>> read_tensor_file(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  const auto nl = std::find(bytes.begin(), bytes.end(), static_cast<std::uint8_t>('\n'));
  if (nl == bytes.end()) throw DataError("tensor file missing header: " + path.string());
  nlohmann::json header = nlohmann::json::parse(std::string(bytes.begin(), nl));
  if (header.at("dtype") != "f32")
    throw DataError("unsupported tensor dtype in " + path.string());
  const auto shape = header.at("shape").get<Shape>();
  const std::size_t offset = static_cast<std::size_t>(nl - bytes.begin()) + 1;
  if (bytes.size() - offset != shape_numel(shape) * 4)
    throw DataError("tensor payload length mismatch: " + path.string());
  std::vector<T> data(shape_numel(shape));
  for (std::size_t i = 0; i < data.size(); ++i)
    data[i] = static_cast<T>(detail::read_f32_le(bytes.data() + offset + i * 4));
  return {header.at("name").get<std::string>(), TensorBase<T>::from(shape, std::move(data))};
}

template <typename T>
void save_checkpoint(const Network<T>& net, const fs::path& path) {
  nlohmann::json spec_json = net.spec();
  nlohmann::json config = spec_json;
  config.erase("arch");
  config.erase("num_classes");
  config.erase("init_seed");
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, t] : net.params().items())
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"dtype", "f32"}});
  nlohmann::json header{{"arch", net.spec().arch},
                        {"config", config},
                        {"num_classes", net.spec().num_classes},
                        {"seed", net.spec().init_seed},
                        {"tensors", tensors}};
  std::string out = header.dump();
  out += '\n';
  for (const auto& [name, t] : net.params().items())
    for (const T v : t.data()) detail::append_f32_le(out, static_cast<float>(v));
  write_file_text(path, out);
}

template <typename T>
std::unique_ptr<Network<T>> load_checkpoint(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  const auto nl = std::find(bytes.begin(), bytes.end(), static_cast<std::uint8_t>('\n'));
  if (nl == bytes.end()) throw DataError("checkpoint missing header: " + path.string());
  nlohmann::json header = nlohmann::json::parse(std::string(bytes.begin(), nl));

  nlohmann::json spec_json = header.at("config");
  spec_json["arch"] = header.at("arch");
  spec_json["num_classes"] = header.at("num_classes");
  spec_json["init_seed"] = header.at("seed");
  ModelSpec spec = spec_json.get<ModelSpec>();

  auto net = build_model<T>(spec);
  std::size_t offset = static_cast<std::size_t>(nl - bytes.begin()) + 1;
  const auto& tensors = header.at("tensors");
  std::size_t idx = 0;
  for (auto& [name, t] : net->params().items()) {
    if (idx >= tensors.size() || tensors[idx].at("name") != name)
      throw DataError("checkpoint tensor index mismatch at " + name);
    const auto shape = tensors[idx].at("shape").get<Shape>();
    if (shape != t.shape())
      throw DataError(strf("checkpoint shape mismatch for %s: expected %s, got %s",
                           name.c_str(), shape_str(t.shape()).c_str(),
                           shape_str(shape).c_str()));
    if (offset + t.numel() * 4 > bytes.size())
      throw DataError("checkpoint payload truncated: " + path.string());
    for (std::size_t i = 0; i < t.numel(); ++i)
      t.data()[i] = static_cast<T>(detail::read_f32_le(bytes.data() + offset + i * 4));
    offset += t.numel() * 4;
    ++idx;
  }
  if (offset != bytes.size())
    throw DataError("checkpoint has trailing bytes: " + path.string());
  return net;
}

}  // namespace mclab

#endif  // MCLAB_MODELS_HPP
