#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fgan/data.hpp"
#include "fgan/models.hpp"
#include "fgan/optim.hpp"

namespace fgan {

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 1;  // the pipeline is built around single-sample batches
  float lr = 0.000364f;
  float beta1 = 0.5032f;
  float beta2 = 0.999f;
  float adam_delta = 1e-8f;
  float lambda_cycle = 10.0f;
  float lambda_identity = 5.0f;
  std::uint64_t seed = 1;
  std::size_t image_size = 256;
  std::size_t n_res_blocks = 9;
  std::size_t d_stages = 5;  // prefix of the 64/128/256/512/512 ladder
  float alpha = 0.325f;
  bool norm_affine = false;
  float norm_delta = 1e-5f;
  std::size_t buffer_capacity = 50;
  std::size_t max_steps = 0;  // 0 = bounded by epochs only
  std::size_t checkpoint_every = 50;  // epochs
  std::size_t sample_every = 50;      // epochs

  void validate() const;
  GeneratorConfig generator_config() const;
  DiscriminatorConfig discriminator_config() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Per-step scalars; every value must be finite for a healthy run.
struct LossRecord {
  std::size_t step = 0;   // global, 1-based
  std::size_t epoch = 0;  // 1-based
  float g_m_adv = 0, g_n_adv = 0;
  float cycle_m = 0, cycle_n = 0;  // M->N->M and N->M->N reconstruction
  float id_m = 0, id_n = 0;
  float d_m = 0, d_n = 0;

  bool finite() const;
  static const char* csv_header();
  std::string csv_row() const;
};

/// mean((label - score)^2) with label 1 for real, 0 for fake.
template <typename T>
Tensor<T> lsgan_loss(const Tensor<T>& scores, bool target_real);

/// mean |a - b|.
template <typename T>
Tensor<T> l1_loss(const Tensor<T>& a, const Tensor<T>& b);

/// Cycle-consistency penalty: mean absolute reconstruction error.
template <typename T>
Tensor<T> cycle_loss(const Tensor<T>& original, const Tensor<T>& reconstructed);

/// Identity penalty: feed the generator an image already in its output domain
/// and penalize any change.
Tensor<float> identity_loss(const ModelGraph& generator, const Tensor<float>& target_domain);

/// History pool of generated images used to stabilize discriminator updates.
/// select() decides what the discriminator trains on (50% fresh / 50%
/// historical once full); the implied insertion is applied by commit() after
/// the optimizer step. Draws are deterministic for a fixed seed. Capacity 0
/// disables the pool.
class FakeImageBuffer {
 public:
  FakeImageBuffer(std::size_t capacity, std::uint64_t seed);

  Tensor<float> select(const Tensor<float>& fresh_detached);
  void commit();
  std::size_t size() const { return store_.size(); }
  std::size_t capacity() const { return capacity_; }

 private:
  std::size_t capacity_;
  std::vector<Tensor<float>> store_;
  std::mt19937 rng_;
  bool pending_append_ = false;
  bool pending_replace_ = false;
  std::size_t pending_slot_ = 0;
  Tensor<float> pending_image_;
};

struct CycleGanNets {
  ModelGraph g_m;  // generates domain M (input from N)
  ModelGraph g_n;  // generates domain N (input from M)
  ModelGraph d_m;  // judges domain-M-ness
  ModelGraph d_n;  // judges domain-N-ness
};

CycleGanNets build_cyclegan(const TrainConfig& cfg);

void save_cyclegan(CycleGanNets& nets, const nlohmann::json& meta, const std::string& path);

struct LoadedCycleGan {
  CycleGanNets nets;
  nlohmann::json meta;
};
LoadedCycleGan load_cyclegan(const std::string& path);

/// Everything one optimization step mutates: the four networks, the two Adam
/// collections (one shared by both generators, one by both discriminators)
/// and the fake-image pools.
struct TrainerState {
  CycleGanNets nets;
  std::vector<Parameter<float>> g_params, d_params;
  AdamState<float> g_opt, d_opt;
  FakeImageBuffer buffer_m, buffer_n;
};

TrainerState make_trainer(const TrainConfig& cfg);

/// One adversarial step: generator update first (adversarial + weighted cycle
/// + weighted identity), then both discriminators against real samples and
/// pool-drawn detached fakes. Pools are updated after the step.
LossRecord train_step(TrainerState& state, const ImageSample& m, const ImageSample& n,
                      const TrainConfig& cfg);

struct TrainResult {
  std::vector<LossRecord> history;
  std::string final_checkpoint;
};

using ProgressFn = std::function<void(const LossRecord&)>;

/// Full training loop over the manifest's train split. Writes
/// out_dir/loss_history.csv, periodic + final checkpoints under
/// out_dir/checkpoints/ and sample grids under out_dir/samples/.
/// Throws NumericError (after logging a diagnostic record) on divergence.
TrainResult train(const TrainConfig& cfg, const CorpusManifest& manifest,
                  const std::string& out_dir, const ProgressFn& progress = {});

/// Inference helper: forwards one sample through a generator (no gradients)
/// and returns the translated sample.
ImageSample translate(const ModelGraph& generator, const ImageSample& input);

/// Horizontal strip of equally sized tiles, stacked rows; sample render sink.
ImageU8 image_grid(const std::vector<std::vector<ImageU8>>& rows);

}  // namespace fgan
