#include "flowdrive/nn.hpp"

#include <cmath>

#include "flowdrive/error.hpp"

namespace flowdrive::nn {

std::size_t ParamStore::add(std::string name, Tensor init) {
  for (const Parameter& p : params_) {
    FD_CHECK(p.name != name, "duplicate parameter name '{}'", name);
  }
  Parameter p;
  p.name = std::move(name);
  p.grad = Tensor(init.shape, 0.0);
  p.value = std::move(init);
  params_.push_back(std::move(p));
  return params_.size() - 1;
}

std::size_t ParamStore::find(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return i;
  }
  throw Error(fmt::format("no parameter named '{}'", name));
}

void ParamStore::zero_grad() {
  for (Parameter& p : params_) std::fill(p.grad.data.begin(), p.grad.data.end(), 0.0);
}

std::size_t ParamStore::numel() const {
  std::size_t n = 0;
  for (const Parameter& p : params_) n += p.value.numel();
  return n;
}

Linear Linear::make(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                    std::mt19937_64& rng, Init init) {
  Tensor w({in, out}, 0.0);
  if (init == Init::Xavier) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& v : w.data) v = u(rng);
  }
  Linear l;
  l.in = in;
  l.out = out;
  l.weight = store.add(name + ".weight", std::move(w));
  l.bias = store.add(name + ".bias", Tensor({out}, 0.0));
  return l;
}

Var Linear::operator()(ParamStore& store, Var x) const {
  Tape& tape = *x.tape();
  const ad::Shape& s = x.shape();
  FD_CHECK(!s.empty() && s.back() == in, "linear: expected last dim {}, got {}", in,
           ad::shape_str(s));
  Var y;
  if (s.size() == 2) {
    y = ad::matmul(x, store.var(tape, weight));
  } else {
    const std::size_t rows = x.value().numel() / in;
    y = ad::matmul(ad::reshape(x, {rows, in}), store.var(tape, weight));
  }
  y = ad::add(y, store.var(tape, bias));
  if (s.size() != 2) {
    ad::Shape os = s;
    os.back() = out;
    y = ad::reshape(y, os);
  }
  return y;
}

AffineNorm AffineNorm::make(ParamStore& store, const std::string& name, std::size_t dim) {
  AffineNorm n;
  n.gain = store.add(name + ".gain", Tensor({dim}, 1.0));
  n.bias = store.add(name + ".bias", Tensor({dim}, 0.0));
  return n;
}

Var AffineNorm::operator()(ParamStore& store, Var x) const {
  Tape& tape = *x.tape();
  return ad::add(ad::mul(ad::layer_norm(x), store.var(tape, gain)), store.var(tape, bias));
}

Mlp Mlp::make(ParamStore& store, const std::string& name, std::size_t in, std::size_t hidden,
              std::size_t out, std::mt19937_64& rng, double dropout, std::uint64_t layer_id) {
  Mlp m;
  m.fc1 = Linear::make(store, name + ".fc1", in, hidden, rng);
  m.fc2 = Linear::make(store, name + ".fc2", hidden, out, rng);
  m.dropout = dropout;
  m.layer_id = layer_id;
  return m;
}

Var Mlp::operator()(ParamStore& store, Var x) const {
  Var h = ad::gelu(fc1(store, x));
  h = ad::dropout(h, dropout, layer_id);
  return fc2(store, h);
}

MultiHeadAttention MultiHeadAttention::make(ParamStore& store, const std::string& name,
                                            std::size_t dim, std::size_t heads,
                                            std::mt19937_64& rng) {
  FD_CHECK(heads > 0 && dim % heads == 0, "attention: dim {} not divisible by {} heads", dim, heads);
  MultiHeadAttention a;
  a.q = Linear::make(store, name + ".q", dim, dim, rng);
  a.k = Linear::make(store, name + ".k", dim, dim, rng);
  a.v = Linear::make(store, name + ".v", dim, dim, rng);
  a.o = Linear::make(store, name + ".o", dim, dim, rng);
  a.heads = heads;
  a.dim = dim;
  return a;
}

Var MultiHeadAttention::operator()(ParamStore& store, Var query, Var kv,
                                   const Tensor* key_mask) const {
  const ad::Shape& qs = query.shape();
  const ad::Shape& ks = kv.shape();
  FD_CHECK(qs.size() == 3 && ks.size() == 3 && qs[0] == ks[0] && qs[2] == dim && ks[2] == dim,
           "attention: bad shapes {} / {}", ad::shape_str(qs), ad::shape_str(ks));
  const std::size_t B = qs[0], T = qs[1], S = ks[1], dk = dim / heads;
  auto split = [&](Var x, std::size_t len) {
    return ad::transpose(ad::reshape(x, {B, len, heads, dk}), 1, 2);  // [B, h, len, dk]
  };
  Var qh = split(q(store, query), T);
  Var kh = split(k(store, kv), S);
  Var vh = split(v(store, kv), S);
  Var scores = ad::scale(ad::matmul(qh, ad::transpose(kh, 2, 3)), 1.0 / std::sqrt(double(dk)));
  Var attn;
  if (key_mask) {
    FD_CHECK(key_mask->shape == ad::Shape({B, S}), "attention: key mask {} != [{}, {}]",
             ad::shape_str(key_mask->shape), B, S);
    Tensor m({B, 1, 1, S}, key_mask->data);
    attn = ad::masked_softmax(scores, m);
  } else {
    attn = ad::softmax(scores);
  }
  Var ctx = ad::matmul(attn, vh);                                   // [B, h, T, dk]
  ctx = ad::reshape(ad::transpose(ctx, 1, 2), {B, T, dim});
  return o(store, ctx);
}

MixerBlock MixerBlock::make(ParamStore& store, const std::string& name, std::size_t tokens,
                            std::size_t channels, std::mt19937_64& rng, double dropout,
                            std::uint64_t layer_id) {
  MixerBlock m;
  m.norm_tokens = AffineNorm::make(store, name + ".norm_tokens", channels);
  m.token_mlp = Mlp::make(store, name + ".token_mlp", tokens, 2 * tokens, tokens, rng, dropout,
                          layer_id);
  m.norm_channels = AffineNorm::make(store, name + ".norm_channels", channels);
  m.channel_mlp = Mlp::make(store, name + ".channel_mlp", channels, 2 * channels, channels, rng,
                            dropout, layer_id + 1);
  return m;
}

Var MixerBlock::operator()(ParamStore& store, Var x) const {
  Var t = ad::transpose(norm_tokens(store, x), 1, 2);  // [G, C, T]
  x = ad::add(x, ad::transpose(token_mlp(store, t), 1, 2));
  return ad::add(x, channel_mlp(store, norm_channels(store, x)));
}

}  // namespace flowdrive::nn
