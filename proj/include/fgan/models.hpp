#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "fgan/layers.hpp"
#include "fgan/optim.hpp"
#include "fgan/tensor.hpp"

namespace fgan {

/// Translator network: reflect-padded 7x7 stem, two stride-2 downsampling
/// convolutions (base_filters -> 2x -> 4x), a residual trunk, two stride-2
/// transposed convolutions back up, and a tanh-headed 7x7 projection to RGB.
struct GeneratorConfig {
  std::size_t input_channels = 3;
  std::size_t base_filters = 64;
  std::size_t n_res_blocks = 9;
  std::size_t image_size = 256;
  float alpha = 0.325f;  // LeakyReLU slope on non-residual stages
  bool norm_affine = false;
  float norm_delta = 1e-5f;

  void validate() const;
};

/// Patch critic: a ladder of stride-2 4x4 convolutions with LeakyReLU
/// (instance norm from the second stage on) and a single-filter 4x4 stride-1
/// head producing a one-channel score map of extent input / 2^stages.
struct DiscriminatorConfig {
  std::size_t input_channels = 3;
  std::vector<std::size_t> filters = {64, 128, 256, 512, 512};
  std::size_t stride = 2;
  float alpha = 0.325f;
  bool norm_affine = false;
  float norm_delta = 1e-5f;

  void validate() const;
};

struct ConvLayer {
  Tensor<float> weight, bias;
  std::size_t stride = 1;
  ConvPadding padding;
};
struct ConvTransposeLayer {
  Tensor<float> weight, bias;
  std::size_t stride = 2, pad = 1, output_padding = 1;
};
struct InstanceNormLayer {
  NormState<float> state;
};
struct LeakyReluLayer {
  float alpha = 0.0f;
};
struct TanhLayer {};
struct ResidualLayer {
  ResidualBlockParams<float> params;
};

using Layer = std::variant<ConvLayer, ConvTransposeLayer, InstanceNormLayer,
                           LeakyReluLayer, TanhLayer, ResidualLayer>;

struct NamedLayer {
  std::string name;
  Layer layer;
};

/// Ordered layer composition with named parameters; the unit a checkpoint
/// stores and an optimizer updates.
class ModelGraph {
 public:
  std::string role;  // G_M, G_N, D_M, D_N, ...
  std::vector<NamedLayer> layers;
  nlohmann::json config_echo;

  Tensor<float> forward(const Tensor<float>& input) const;

  /// Deterministic construction-order list; tensors alias graph storage.
  std::vector<Parameter<float>> parameters();
  std::size_t parameter_count();

  void set_requires_grad(bool flag);
  void zero_grads();
};

ModelGraph build_generator(const GeneratorConfig& cfg, std::uint64_t seed);
ModelGraph build_discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Checkpoint container. Binary layout, little-endian throughout:
//   magic "FGAN" | u16 version=1 | u32 meta_len | meta (JSON) | u32 count |
//   count x (u16 name_len | name | u8 dtype | u8 rank | u64 extents[rank] |
//            payload) | u32 crc32 of all preceding bytes
// dtype codes: 0 = fp32, 1 = fp64.
// ---------------------------------------------------------------------------

struct CheckpointTensor {
  std::string name;
  std::uint8_t dtype = 0;
  Shape shape;
  std::vector<std::uint8_t> raw;  // little-endian scalars

  static CheckpointTensor from(const std::string& name, const Tensor<float>& t);
  static CheckpointTensor from(const std::string& name, const Tensor<double>& t);
  Tensor<float> to_f32() const;
  Tensor<double> to_f64() const;
};

struct Checkpoint {
  static constexpr std::uint16_t kVersion = 1;
  nlohmann::json meta;  // role tags, epoch, step, seed, config echo
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const;
  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

/// Appends every parameter of the graph as "role.param" entries.
void append_model(Checkpoint& ckpt, ModelGraph& model);

/// Copies checkpoint values into matching parameters (by "role.param" name);
/// every parameter must be present with identical dtype and shape.
void load_model(const Checkpoint& ckpt, ModelGraph& model);

}  // namespace fgan
