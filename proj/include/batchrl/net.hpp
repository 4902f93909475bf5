#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "batchrl/losses.hpp"
#include "batchrl/rng.hpp"

namespace batchrl {

enum class OutputHead : std::uint8_t { Identity = 0, Softmax = 1 };

// Dropout masks for one forward pass. masks[l] applies to the input of layer
// l; an empty entry means no mask there. Surviving units are scaled by
// 1/(1-p) so the masked forward matches the unmasked one in expectation.
struct DropoutSpec {
  double probability = 0.0;
  std::vector<std::vector<std::uint8_t>> masks;

  double scale() const { return 1.0 / (1.0 - probability); }
};

// Fully-connected network with explicit flat parameter and gradient vectors.
// Hidden activations are rectified-linear; the output head is identity or
// softmax. When head_count > 1 the output is interpreted as
// [output_dim/head_count actions x head_count heads], row-major.
class DenseNet {
 public:
  DenseNet() = default;
  DenseNet(std::vector<int> layer_sizes, int head_count = 1,
           OutputHead head = OutputHead::Identity)
      : layer_sizes_(std::move(layer_sizes)),
        head_count_(head_count),
        head_(head) {
    if (layer_sizes_.size() < 2) {
      throw std::invalid_argument("DenseNet: need at least input and output");
    }
    for (int s : layer_sizes_) {
      if (s <= 0) throw std::invalid_argument("DenseNet: layer sizes must be positive");
    }
    if (head_count_ <= 0 || layer_sizes_.back() % head_count_ != 0) {
      throw std::invalid_argument("DenseNet: output not divisible by head_count");
    }
    std::size_t count = 0;
    offsets_.push_back(0);
    for (std::size_t l = 0; l + 1 < layer_sizes_.size(); ++l) {
      count += static_cast<std::size_t>(layer_sizes_[l] + 1) * layer_sizes_[l + 1];
      offsets_.push_back(count);
    }
    params_.assign(count, 0.0);
  }

  const std::vector<int>& layer_sizes() const { return layer_sizes_; }
  int input_dim() const { return layer_sizes_.front(); }
  int output_dim() const { return layer_sizes_.back(); }
  int head_count() const { return head_count_; }
  OutputHead head() const { return head_; }
  int num_layers() const { return static_cast<int>(layer_sizes_.size()) - 1; }

  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  std::size_t param_count() const { return params_.size(); }

  // Uniform fan-in initialization for rectified-linear layers.
  void init_he_uniform(Rng& rng) {
    for (int l = 0; l < num_layers(); ++l) {
      const int in = layer_sizes_[l];
      const int out = layer_sizes_[l + 1];
      const double limit = std::sqrt(6.0 / in);
      double* w = weights(l);
      for (int i = 0; i < out * in; ++i) w[i] = rng.uniform(-limit, limit);
      double* b = biases(l);
      for (int i = 0; i < out; ++i) b[i] = 0.0;
    }
  }

  // weights(l) is row-major [out x in]; biases(l) follows it.
  double* weights(int l) { return params_.data() + offsets_[l]; }
  const double* weights(int l) const { return params_.data() + offsets_[l]; }
  double* biases(int l) {
    return params_.data() + offsets_[l] +
           static_cast<std::size_t>(layer_sizes_[l]) * layer_sizes_[l + 1];
  }
  const double* biases(int l) const {
    return params_.data() + offsets_[l] +
           static_cast<std::size_t>(layer_sizes_[l]) * layer_sizes_[l + 1];
  }

  struct ForwardCache {
    // inputs[l]: the (post-dropout) input fed to layer l.
    std::vector<std::vector<double>> inputs;
    // pre[l]: W x + b before activation.
    std::vector<std::vector<double>> pre;
    const DropoutSpec* dropout = nullptr;
  };

  // Raw network output (logits for a softmax head).
  std::vector<double> forward_raw(const std::vector<double>& input,
                                  const DropoutSpec* dropout = nullptr,
                                  ForwardCache* cache = nullptr) const {
    if (input.size() != static_cast<std::size_t>(input_dim())) {
      throw std::invalid_argument("DenseNet::forward: input dimension mismatch");
    }
    if (dropout && !dropout->masks.empty() &&
        dropout->masks.size() != static_cast<std::size_t>(num_layers())) {
      throw std::invalid_argument("DenseNet::forward: dropout mask count mismatch");
    }
    if (cache) {
      cache->inputs.assign(num_layers(), {});
      cache->pre.assign(num_layers(), {});
      cache->dropout = dropout;
    }
    std::vector<double> x = input;
    for (int l = 0; l < num_layers(); ++l) {
      if (dropout && !dropout->masks.empty() && !dropout->masks[l].empty()) {
        const auto& mask = dropout->masks[l];
        if (mask.size() != x.size()) {
          throw std::invalid_argument("DenseNet::forward: dropout mask size mismatch");
        }
        const double s = dropout->scale();
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = mask[i] ? x[i] * s : 0.0;
      }
      if (cache) cache->inputs[l] = x;
      const int in = layer_sizes_[l];
      const int out = layer_sizes_[l + 1];
      std::vector<double> y(out);
      const double* w = weights(l);
      const double* b = biases(l);
      for (int o = 0; o < out; ++o) {
        double acc = b[o];
        const double* row = w + static_cast<std::size_t>(o) * in;
        for (int i = 0; i < in; ++i) acc += row[i] * x[i];
        y[o] = acc;
      }
      if (cache) cache->pre[l] = y;
      if (l + 1 < num_layers()) {
        for (double& v : y) v = v > 0.0 ? v : 0.0;
      }
      x = std::move(y);
    }
    return x;
  }

  // Output with the head activation applied.
  std::vector<double> forward(const std::vector<double>& input,
                              const DropoutSpec* dropout = nullptr) const {
    std::vector<double> out = forward_raw(input, dropout);
    if (head_ == OutputHead::Softmax) return softmax(out);
    return out;
  }

  struct BackwardResult {
    std::vector<double> param_grad;
    std::vector<double> input_grad;
  };

  // Exact reverse-mode gradient of (raw_output . upstream) w.r.t. parameters
  // and the network input. `upstream` is w.r.t. the raw output.
  BackwardResult backward(const ForwardCache& cache,
                          const std::vector<double>& upstream) const {
    if (upstream.size() != static_cast<std::size_t>(output_dim())) {
      throw std::invalid_argument("DenseNet::backward: upstream shape mismatch");
    }
    BackwardResult res;
    res.param_grad.assign(params_.size(), 0.0);
    std::vector<double> g = upstream;
    for (int l = num_layers() - 1; l >= 0; --l) {
      const int in = layer_sizes_[l];
      const int out = layer_sizes_[l + 1];
      const auto& x = cache.inputs[l];
      double* gw = res.param_grad.data() + offsets_[l];
      double* gb = gw + static_cast<std::size_t>(in) * out;
      const double* w = weights(l);
      std::vector<double> gx(in, 0.0);
      for (int o = 0; o < out; ++o) {
        gb[o] += g[o];
        double* grow = gw + static_cast<std::size_t>(o) * in;
        const double* wrow = w + static_cast<std::size_t>(o) * in;
        for (int i = 0; i < in; ++i) {
          grow[i] += g[o] * x[i];
          gx[i] += wrow[i] * g[o];
        }
      }
      // through the dropout mask on this layer's input
      if (cache.dropout && !cache.dropout->masks.empty() &&
          !cache.dropout->masks[l].empty()) {
        const auto& mask = cache.dropout->masks[l];
        const double s = cache.dropout->scale();
        for (int i = 0; i < in; ++i) gx[i] = mask[i] ? gx[i] * s : 0.0;
      }
      if (l > 0) {
        // through the rectifier of the previous layer
        const auto& pre_prev = cache.pre[l - 1];
        for (int i = 0; i < in; ++i) {
          if (pre_prev[i] <= 0.0) gx[i] = 0.0;
        }
      }
      g = std::move(gx);
    }
    res.input_grad = std::move(g);
    return res;
  }

 private:
  std::vector<int> layer_sizes_;
  int head_count_ = 1;
  OutputHead head_ = OutputHead::Identity;
  std::vector<std::size_t> offsets_;
  std::vector<double> params_;
};

// Samples masks for every layer input except the first (the encoder layer
// stays undropped, matching dropout placed before the fully-connected layers
// that follow the trunk).
inline DropoutSpec sample_dropout(const DenseNet& net, double probability,
                                  Rng& rng) {
  if (probability < 0.0 || probability >= 1.0) {
    throw std::invalid_argument("sample_dropout: probability must be in [0,1)");
  }
  DropoutSpec spec;
  spec.probability = probability;
  spec.masks.resize(net.num_layers());
  for (int l = 1; l < net.num_layers(); ++l) {
    spec.masks[l].resize(net.layer_sizes()[l]);
    for (auto& m : spec.masks[l]) {
      m = rng.uniform01() >= probability ? 1 : 0;
    }
  }
  return spec;
}

// Mean over the K heads for one action, for [actions x K] outputs.
inline double head_mean(const std::vector<double>& output, int action,
                        int head_count) {
  double sum = 0.0;
  for (int k = 0; k < head_count; ++k) {
    sum += output[static_cast<std::size_t>(action) * head_count + k];
  }
  return sum / head_count;
}

// Per-action values collapsed over heads by the mean.
inline std::vector<double> action_values(const std::vector<double>& output,
                                         int head_count) {
  const int num_actions = static_cast<int>(output.size()) / head_count;
  std::vector<double> q(num_actions);
  for (int a = 0; a < num_actions; ++a) q[a] = head_mean(output, a, head_count);
  return q;
}

// ---------------------------------------------------------------------------
// Parameter snapshot format: "BRLN", version, layer count, sizes, head count,
// head type, parameter count, little-endian float64 parameters.
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
void write_pod(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}
template <typename T>
T read_pod(std::istream& in, const std::string& what) {
  T value;
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw std::runtime_error("parameter file truncated reading " + what);
  return value;
}
}  // namespace detail

inline void save_net(const DenseNet& net, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_net: cannot open " + path);
  out.write("BRLN", 4);
  detail::write_pod<std::uint32_t>(out, 1);  // version
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(net.layer_sizes().size()));
  for (int s : net.layer_sizes()) detail::write_pod<std::uint32_t>(out, s);
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(net.head_count()));
  detail::write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(net.head()));
  detail::write_pod<std::uint64_t>(out, net.param_count());
  out.write(reinterpret_cast<const char*>(net.params().data()),
            static_cast<std::streamsize>(net.param_count() * sizeof(double)));
  if (!out) throw std::runtime_error("save_net: write failed for " + path);
}

inline DenseNet load_net(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_net: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "BRLN", 4) != 0) {
    throw std::runtime_error("load_net: bad magic in " + path);
  }
  const auto version = detail::read_pod<std::uint32_t>(in, "version");
  if (version != 1) throw std::runtime_error("load_net: unsupported version");
  const auto n = detail::read_pod<std::uint32_t>(in, "layer count");
  std::vector<int> sizes(n);
  for (auto& s : sizes) s = static_cast<int>(detail::read_pod<std::uint32_t>(in, "layer size"));
  const auto heads = detail::read_pod<std::uint32_t>(in, "head count");
  const auto head_type = detail::read_pod<std::uint8_t>(in, "head type");
  const auto count = detail::read_pod<std::uint64_t>(in, "param count");
  DenseNet net(sizes, static_cast<int>(heads), static_cast<OutputHead>(head_type));
  if (net.param_count() != count) {
    throw std::runtime_error("load_net: parameter count mismatch in " + path);
  }
  in.read(reinterpret_cast<char*>(net.params().data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw std::runtime_error("load_net: parameter array truncated in " + path);
  return net;
}

}  // namespace batchrl
