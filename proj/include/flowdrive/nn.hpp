#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "flowdrive/autodiff.hpp"

namespace flowdrive::nn {

using ad::Parameter;
using ad::Tape;
using ad::Tensor;
using ad::Var;

/// Ordered, name-addressed parameter storage. Layers hold indices into it so
/// a model can be copied by value (EMA copies, checkpoints).
class ParamStore {
 public:
  std::size_t add(std::string name, Tensor init);

  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  std::size_t size() const { return params_.size(); }
  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }

  /// Index of the parameter called `name`; throws if absent.
  std::size_t find(const std::string& name) const;

  Var var(Tape& tape, std::size_t i) { return tape.param(params_[i]); }
  void zero_grad();
  std::size_t numel() const;

 private:
  std::vector<Parameter> params_;
};

enum class Init { Xavier, Zero };

struct Linear {
  std::size_t weight = 0;
  std::size_t bias = 0;
  std::size_t in = 0;
  std::size_t out = 0;

  static Linear make(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                     std::mt19937_64& rng, Init init = Init::Xavier);
  /// x[..., in] -> [..., out]
  Var operator()(ParamStore& store, Var x) const;
};

/// Learnable gain/bias applied after layer_norm.
struct AffineNorm {
  std::size_t gain = 0;
  std::size_t bias = 0;

  static AffineNorm make(ParamStore& store, const std::string& name, std::size_t dim);
  Var operator()(ParamStore& store, Var x) const;
};

/// Two-layer GELU MLP with optional dropout on the hidden activations.
struct Mlp {
  Linear fc1;
  Linear fc2;
  double dropout = 0.0;
  std::uint64_t layer_id = 0;

  static Mlp make(ParamStore& store, const std::string& name, std::size_t in, std::size_t hidden,
                  std::size_t out, std::mt19937_64& rng, double dropout, std::uint64_t layer_id);
  Var operator()(ParamStore& store, Var x) const;
};

struct MultiHeadAttention {
  Linear q, k, v, o;
  std::size_t heads = 1;
  std::size_t dim = 0;

  static MultiHeadAttention make(ParamStore& store, const std::string& name, std::size_t dim,
                                 std::size_t heads, std::mt19937_64& rng);
  /// query[B, T, d] attends over kv[B, S, d]. `key_mask` is [B, S] with 1 for
  /// valid keys (nullptr = all valid).
  Var operator()(ParamStore& store, Var query, Var kv, const Tensor* key_mask) const;
};

/// Pre-norm MLP-Mixer block over x[G, T, C]: token mixing across T, then
/// channel mixing across C, each with a residual.
struct MixerBlock {
  AffineNorm norm_tokens;
  Mlp token_mlp;
  AffineNorm norm_channels;
  Mlp channel_mlp;

  static MixerBlock make(ParamStore& store, const std::string& name, std::size_t tokens,
                         std::size_t channels, std::mt19937_64& rng, double dropout,
                         std::uint64_t layer_id);
  Var operator()(ParamStore& store, Var x) const;
};

}  // namespace flowdrive::nn
