#pragma once

// Velocity field v(t, x_t, c): scene encoder (Mixer branches + attention
// fusion) and a DiT decoder with adaLN-Zero conditioning.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "flowdrive/autodiff.hpp"
#include "flowdrive/nn.hpp"
#include "flowdrive/scene.hpp"

namespace flowdrive::model {

using ad::Tape;
using ad::Tensor;
using ad::Var;
using nn::ParamStore;

enum class LaneAux { Add, Concat };
enum class CondMode { Add, Concat };
enum class ActionSpace { Position, Velocity };

struct ModelConfig {
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t fusion_layers = 2;
  std::size_t dit_layers = 2;
  double dropout = 0.1;
  LaneAux lane_aux = LaneAux::Add;
  CondMode cond = CondMode::Add;
  bool pooled_token = true;
  ActionSpace action = ActionSpace::Position;
  /// Meters per unit of the flow's position channels.
  double pos_scale = 20.0;

  bool operator==(const ModelConfig&) const = default;
};

/// Trajectory <-> flow sample [H, 4]. Positions are divided by pos_scale;
/// velocity actions store per-step displacements instead of positions.
Tensor encode_trajectory(const scene::Trajectory& traj, const ModelConfig& cfg);
/// Inverse of encode_trajectory on an [H, 4] tensor; headings renormalized.
scene::Trajectory decode_trajectory(const Tensor& x, const ModelConfig& cfg);

/// Normalized contexts stacked along a leading batch axis.
struct ContextBatch {
  std::size_t batch = 0;
  Tensor neighbors;      ///< [B, P_n, T_p, F_n]
  Tensor neighbor_mask;  ///< [B, P_n]
  std::vector<int> neighbor_type;
  Tensor statics;      ///< [B, P_s, F_s]
  Tensor static_mask;  ///< [B, P_s]
  Tensor lanes;        ///< [B, P_l, V, F_l]
  Tensor lane_mask;    ///< [B, P_l]
  std::vector<int> lane_light;
  std::vector<int> lane_on_route;
  Tensor lane_speed;  ///< [B * P_l, 1] normalized speed limit
  Tensor ego;         ///< [B, E]
};

ContextBatch make_batch(std::span<const scene::SceneContext* const> contexts);
ContextBatch make_batch(std::span<const scene::SceneContext> contexts);

/// Context tokens [B, N, d] with a [B, N] validity mask; invalid rows zero.
struct TokenSet {
  Var tokens;
  Tensor mask;
};

/// B copies of a single-scene token set, concatenated along the batch axis.
TokenSet repeat(const TokenSet& ts, std::size_t copies);

class Encoder {
 public:
  static Encoder make(ParamStore& store, const ModelConfig& cfg, const scene::SceneDims& dims,
                      std::mt19937_64& rng);

  Var encode_neighbors(ParamStore& store, Tape& tape, const ContextBatch& b) const;
  Var encode_statics(ParamStore& store, Tape& tape, const ContextBatch& b) const;
  Var encode_lanes(ParamStore& store, Tape& tape, const ContextBatch& b) const;
  /// Positional embedding, L pre-norm attention + MLP blocks, re-zeroing.
  TokenSet fuse(ParamStore& store, Var tokens, const Tensor& mask) const;
  TokenSet operator()(ParamStore& store, Tape& tape, const ContextBatch& b) const;

 private:
  struct FusionLayer {
    nn::AffineNorm norm_attn;
    nn::MultiHeadAttention attn;
    nn::AffineNorm norm_mlp;
    nn::Mlp mlp;
  };

  ModelConfig cfg_;
  scene::SceneDims dims_;
  nn::Linear neighbor_in_;
  nn::MixerBlock neighbor_mixer_;
  std::size_t neighbor_type_ = 0;
  nn::Mlp static_mlp_;
  nn::Linear lane_in_;
  nn::MixerBlock lane_mixer_;
  std::size_t light_table_ = 0;
  std::size_t route_table_ = 0;
  nn::Mlp speed_mlp_;
  nn::Linear lane_concat_;
  std::size_t position_ = 0;
  std::vector<FusionLayer> layers_;
};

/// Embedded decoder inputs: ego token followed by H action tokens, plus the
/// adaLN conditioning vector.
struct DecoderTokens {
  Var tokens;        ///< [B, H + 1, d]
  Var conditioning;  ///< [B, d]
};

class Decoder {
 public:
  static Decoder make(ParamStore& store, const ModelConfig& cfg, const scene::SceneDims& dims,
                      std::mt19937_64& rng);

  /// x_t [B, H, A], t [B], ego [B, E].
  DecoderTokens embed_inputs(ParamStore& store, Var x_t, Var t, Var ego,
                             const TokenSet& context) const;
  Var dit_block(ParamStore& store, std::size_t layer, Var tokens, Var conditioning,
                const TokenSet& context) const;
  /// Velocity [B, H, A]; the ego output token is dropped.
  Var predict(ParamStore& store, Var x_t, Var t, Var ego, const TokenSet& context) const;

  std::size_t layers() const { return blocks_.size(); }

 private:
  struct Block {
    nn::Linear modulation;  ///< d -> 9d: (shift, scale, gate) x 3 sub-layers
    nn::MultiHeadAttention self_attn;
    nn::MultiHeadAttention cross_attn;
    nn::Mlp mlp;
  };

  ModelConfig cfg_;
  scene::SceneDims dims_;
  nn::Mlp action_mlp_;
  nn::Mlp ego_mlp_;
  std::size_t position_ = 0;
  nn::Mlp time_mlp_;
  nn::Linear cond_concat_;
  std::vector<Block> blocks_;
  nn::Linear final_modulation_;
  nn::Linear head_;
};

/// Encoder + decoder with their parameters.
class FlowModel {
 public:
  static FlowModel create(const ModelConfig& cfg, const scene::SceneDims& dims,
                          std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const scene::SceneDims& dims() const { return dims_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const Encoder& encoder() const { return encoder_; }
  const Decoder& decoder() const { return decoder_; }

  TokenSet encode(Tape& tape, const ContextBatch& b);
  /// x_t [B, H, A] with one flow time per row.
  Var velocity(Tape& tape, const TokenSet& context, Var x_t, std::span<const double> t,
               const Tensor& ego);
  /// Velocity value at a single flow time shared by all rows; the context
  /// must live on `tape`.
  Tensor velocity_value(Tape& tape, const TokenSet& context, const Tensor& x_t, double t,
                        const Tensor& ego);

 private:
  ModelConfig cfg_;
  scene::SceneDims dims_;
  ParamStore params_;
  Encoder encoder_;
  Decoder decoder_;
};

}  // namespace flowdrive::model
