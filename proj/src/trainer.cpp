#include "fgan/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <unordered_map>

namespace fs = std::filesystem;

namespace fgan {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size != 1) {
    throw ConfigError("train: batch_size is fixed at 1, got " + std::to_string(batch_size));
  }
  if (lambda_cycle < 0 || lambda_identity < 0) {
    throw ConfigError("train: loss weights must be non-negative");
  }
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
    throw ConfigError("train: Adam decay rates must lie in [0, 1)");
  }
  if (d_stages < 1 || d_stages > 5) {
    throw ConfigError("train: d_stages must lie in [1, 5]");
  }
  generator_config().validate();
  const std::size_t div = std::size_t(1) << d_stages;
  if (image_size % div != 0) {
    throw ConfigError("train: image_size " + std::to_string(image_size) +
                      " not divisible by 2^d_stages = " + std::to_string(div));
  }
}

GeneratorConfig TrainConfig::generator_config() const {
  GeneratorConfig g;
  g.n_res_blocks = n_res_blocks;
  g.image_size = image_size;
  g.alpha = alpha;
  g.norm_affine = norm_affine;
  g.norm_delta = norm_delta;
  return g;
}

DiscriminatorConfig TrainConfig::discriminator_config() const {
  DiscriminatorConfig d;
  const std::vector<std::size_t> ladder = {64, 128, 256, 512, 512};
  d.filters.assign(ladder.begin(), ladder.begin() + static_cast<std::ptrdiff_t>(d_stages));
  d.alpha = alpha;
  d.norm_affine = norm_affine;
  d.norm_delta = norm_delta;
  return d;
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"lr", lr},
          {"beta1", beta1},
          {"beta2", beta2},
          {"adam_delta", adam_delta},
          {"lambda_cycle", lambda_cycle},
          {"lambda_identity", lambda_identity},
          {"seed", seed},
          {"image_size", image_size},
          {"n_res_blocks", n_res_blocks},
          {"d_stages", d_stages},
          {"alpha", alpha},
          {"norm_affine", norm_affine},
          {"norm_delta", norm_delta},
          {"buffer_capacity", buffer_capacity},
          {"max_steps", max_steps},
          {"checkpoint_every", checkpoint_every},
          {"sample_every", sample_every}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_delta = j.value("adam_delta", c.adam_delta);
  c.lambda_cycle = j.value("lambda_cycle", c.lambda_cycle);
  c.lambda_identity = j.value("lambda_identity", c.lambda_identity);
  c.seed = j.value("seed", c.seed);
  c.image_size = j.value("image_size", c.image_size);
  c.n_res_blocks = j.value("n_res_blocks", c.n_res_blocks);
  c.d_stages = j.value("d_stages", c.d_stages);
  c.alpha = j.value("alpha", c.alpha);
  c.norm_affine = j.value("norm_affine", c.norm_affine);
  c.norm_delta = j.value("norm_delta", c.norm_delta);
  c.buffer_capacity = j.value("buffer_capacity", c.buffer_capacity);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.sample_every = j.value("sample_every", c.sample_every);
  return c;
}

bool LossRecord::finite() const {
  for (float v : {g_m_adv, g_n_adv, cycle_m, cycle_n, id_m, id_n, d_m, d_n}) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

const char* LossRecord::csv_header() {
  return "step,epoch,g_m_adv,g_n_adv,cycle_m,cycle_n,id_m,id_n,d_m,d_n";
}

std::string LossRecord::csv_row() const {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%zu,%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", step,
                epoch, g_m_adv, g_n_adv, cycle_m, cycle_n, id_m, id_n, d_m, d_n);
  return buf;
}

template <typename T>
Tensor<T> lsgan_loss(const Tensor<T>& scores, bool target_real) {
  if (!all_finite(scores)) throw NumericError("lsgan_loss: non-finite scores");
  return mean(square(sub(scores, T(target_real ? 1 : 0))));
}

template <typename T>
Tensor<T> l1_loss(const Tensor<T>& a, const Tensor<T>& b) {
  return mean(abs_val(sub(a, b)));
}

template <typename T>
Tensor<T> cycle_loss(const Tensor<T>& original, const Tensor<T>& reconstructed) {
  return l1_loss(reconstructed, original);
}

Tensor<float> identity_loss(const ModelGraph& generator, const Tensor<float>& target_domain) {
  return l1_loss(generator.forward(target_domain), target_domain);
}

template Tensor<float> lsgan_loss<float>(const Tensor<float>&, bool);
template Tensor<double> lsgan_loss<double>(const Tensor<double>&, bool);
template Tensor<float> l1_loss<float>(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> l1_loss<double>(const Tensor<double>&, const Tensor<double>&);
template Tensor<float> cycle_loss<float>(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> cycle_loss<double>(const Tensor<double>&, const Tensor<double>&);

// ---------------------------------------------------------------------------
// Fake image pool
// ---------------------------------------------------------------------------

FakeImageBuffer::FakeImageBuffer(std::size_t capacity, std::uint64_t seed)
    : capacity_(capacity), rng_(static_cast<std::uint32_t>(seed)) {}

Tensor<float> FakeImageBuffer::select(const Tensor<float>& fresh_detached) {
  commit();  // apply any forgotten plan defensively before a new draw
  if (capacity_ == 0) return fresh_detached;
  if (store_.size() < capacity_) {
    pending_append_ = true;
    pending_image_ = fresh_detached;
    return fresh_detached;
  }
  std::uniform_real_distribution<float> coin(0.0f, 1.0f);
  if (coin(rng_) < 0.5f) {
    return fresh_detached;  // train on the fresh one, keep history untouched
  }
  std::uniform_int_distribution<std::size_t> pick(0, store_.size() - 1);
  pending_slot_ = pick(rng_);
  pending_replace_ = true;
  pending_image_ = fresh_detached;
  return store_[pending_slot_];
}

void FakeImageBuffer::commit() {
  if (pending_append_) {
    store_.push_back(pending_image_);
  } else if (pending_replace_) {
    store_[pending_slot_] = pending_image_;
  }
  pending_append_ = pending_replace_ = false;
  pending_image_ = {};
}

// ---------------------------------------------------------------------------
// Networks and state
// ---------------------------------------------------------------------------

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t x = seed + 0x9E3779B97F4A7C15ULL * (tag + 1);
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  return x;
}

std::vector<Parameter<float>> prefixed_params(ModelGraph& model) {
  std::vector<Parameter<float>> out;
  for (auto& p : model.parameters()) {
    out.push_back({model.role + "." + p.name, p.value});
  }
  return out;
}

}  // namespace

CycleGanNets build_cyclegan(const TrainConfig& cfg) {
  CycleGanNets nets;
  nets.g_m = build_generator(cfg.generator_config(), mix_seed(cfg.seed, 1));
  nets.g_m.role = "G_M";
  nets.g_n = build_generator(cfg.generator_config(), mix_seed(cfg.seed, 2));
  nets.g_n.role = "G_N";
  nets.d_m = build_discriminator(cfg.discriminator_config(), mix_seed(cfg.seed, 3));
  nets.d_m.role = "D_M";
  nets.d_n = build_discriminator(cfg.discriminator_config(), mix_seed(cfg.seed, 4));
  nets.d_n.role = "D_N";
  return nets;
}

void save_cyclegan(CycleGanNets& nets, const nlohmann::json& meta, const std::string& path) {
  Checkpoint ckpt;
  ckpt.meta = meta;
  ckpt.meta["roles"] = {"G_M", "G_N", "D_M", "D_N"};
  append_model(ckpt, nets.g_m);
  append_model(ckpt, nets.g_n);
  append_model(ckpt, nets.d_m);
  append_model(ckpt, nets.d_n);
  ckpt.save(path);
}

LoadedCycleGan load_cyclegan(const std::string& path) {
  Checkpoint ckpt = Checkpoint::load(path);
  if (!ckpt.meta.contains("config")) {
    throw IoError("checkpoint " + path + " has no config echo in its metadata");
  }
  TrainConfig cfg = TrainConfig::from_json(ckpt.meta["config"]);
  LoadedCycleGan out{build_cyclegan(cfg), ckpt.meta};
  load_model(ckpt, out.nets.g_m);
  load_model(ckpt, out.nets.g_n);
  load_model(ckpt, out.nets.d_m);
  load_model(ckpt, out.nets.d_n);
  return out;
}

TrainerState make_trainer(const TrainConfig& cfg) {
  cfg.validate();
  TrainerState st{build_cyclegan(cfg),
                  {},
                  {},
                  AdamState<float>::with(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_delta),
                  AdamState<float>::with(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_delta),
                  FakeImageBuffer(cfg.buffer_capacity, mix_seed(cfg.seed, 5)),
                  FakeImageBuffer(cfg.buffer_capacity, mix_seed(cfg.seed, 6))};
  st.g_params = prefixed_params(st.nets.g_m);
  for (auto& p : prefixed_params(st.nets.g_n)) st.g_params.push_back(p);
  st.d_params = prefixed_params(st.nets.d_m);
  for (auto& p : prefixed_params(st.nets.d_n)) st.d_params.push_back(p);
  return st;
}

// ---------------------------------------------------------------------------
// One adversarial step
// ---------------------------------------------------------------------------

LossRecord train_step(TrainerState& st, const ImageSample& m_img, const ImageSample& n_img,
                      const TrainConfig& cfg) {
  if (m_img.domain != Domain::kM || n_img.domain != Domain::kN) {
    throw DataError("train_step: samples carry the wrong domain tags");
  }
  const Tensor<float> m = with_batch_dim(m_img.data);
  const Tensor<float> n = with_batch_dim(n_img.data);
  LossRecord rec;

  // Generator update; discriminators frozen so the adversarial terms push
  // only generator weights.
  st.nets.d_m.set_requires_grad(false);
  st.nets.d_n.set_requires_grad(false);
  for (auto& p : st.g_params) p.value.clear_grad();
  Tensor<float> fake_m, fake_n;
  {
    GradientTape tape;
    TapeScope scope(tape);
    fake_m = st.nets.g_m.forward(n);
    fake_n = st.nets.g_n.forward(m);
    Tensor<float> adv_m = lsgan_loss(st.nets.d_m.forward(fake_m), true);
    Tensor<float> adv_n = lsgan_loss(st.nets.d_n.forward(fake_n), true);
    Tensor<float> rec_m = st.nets.g_m.forward(fake_n);
    Tensor<float> rec_n = st.nets.g_n.forward(fake_m);
    Tensor<float> cyc_m = cycle_loss(m, rec_m);
    Tensor<float> cyc_n = cycle_loss(n, rec_n);
    Tensor<float> idt_m = identity_loss(st.nets.g_m, m);
    Tensor<float> idt_n = identity_loss(st.nets.g_n, n);
    rec.g_m_adv = adv_m.item();
    rec.g_n_adv = adv_n.item();
    rec.cycle_m = cyc_m.item();
    rec.cycle_n = cyc_n.item();
    rec.id_m = idt_m.item();
    rec.id_n = idt_n.item();
    Tensor<float> loss =
        add(add(adv_m, adv_n), add(scale(add(cyc_m, cyc_n), cfg.lambda_cycle),
                                   scale(add(idt_m, idt_n), cfg.lambda_identity)));
    tape.backward(loss);
  }
  adam_step(std::span<Parameter<float>>(st.g_params), st.g_opt);

  // Discriminator update on real samples and detached, pool-drawn fakes.
  st.nets.d_m.set_requires_grad(true);
  st.nets.d_n.set_requires_grad(true);
  st.nets.g_m.set_requires_grad(false);
  st.nets.g_n.set_requires_grad(false);
  for (auto& p : st.d_params) p.value.clear_grad();
  const Tensor<float> fake_m_pool = st.buffer_m.select(detach(fake_m));
  const Tensor<float> fake_n_pool = st.buffer_n.select(detach(fake_n));
  {
    GradientTape tape;
    TapeScope scope(tape);
    Tensor<float> dm = add(lsgan_loss(st.nets.d_m.forward(m), true),
                           lsgan_loss(st.nets.d_m.forward(fake_m_pool), false));
    Tensor<float> dn = add(lsgan_loss(st.nets.d_n.forward(n), true),
                           lsgan_loss(st.nets.d_n.forward(fake_n_pool), false));
    rec.d_m = dm.item();
    rec.d_n = dn.item();
    Tensor<float> loss = add(dm, dn);
    tape.backward(loss);
  }
  adam_step(std::span<Parameter<float>>(st.d_params), st.d_opt);
  st.buffer_m.commit();
  st.buffer_n.commit();
  st.nets.g_m.set_requires_grad(true);
  st.nets.g_n.set_requires_grad(true);
  return rec;
}

// ---------------------------------------------------------------------------
// Full loop
// ---------------------------------------------------------------------------

namespace {

nlohmann::json checkpoint_meta(const TrainConfig& cfg, std::size_t epoch, std::size_t step) {
  return {{"epoch", epoch}, {"step", step}, {"seed", cfg.seed}, {"config", cfg.to_json()}};
}

}  // namespace

ImageSample translate(const ModelGraph& generator, const ImageSample& input) {
  ImageSample out;
  out.path = input.path;
  out.domain = input.domain == Domain::kM ? Domain::kN : Domain::kM;
  out.data = without_batch_dim(generator.forward(with_batch_dim(input.data)));
  return out;
}

ImageU8 image_grid(const std::vector<std::vector<ImageU8>>& rows) {
  if (rows.empty() || rows[0].empty()) throw DataError("image_grid: no tiles");
  const std::size_t th = rows[0][0].height, tw = rows[0][0].width;
  const std::size_t cols = rows[0].size();
  for (const auto& row : rows) {
    if (row.size() != cols) throw DataError("image_grid: ragged rows");
    for (const auto& tile : row) {
      if (tile.height != th || tile.width != tw) {
        throw DataError("image_grid: tiles differ in size");
      }
    }
  }
  ImageU8 out;
  out.width = tw * cols;
  out.height = th * rows.size();
  out.pixels.assign(out.width * out.height * 3, 0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      for (std::size_t y = 0; y < th; ++y) {
        for (std::size_t x = 0; x < tw; ++x) {
          for (std::size_t ch = 0; ch < 3; ++ch) {
            out.at(r * th + y, c * tw + x, ch) = rows[r][c].at(y, x, ch);
          }
        }
      }
    }
  }
  return out;
}

TrainResult train(const TrainConfig& cfg, const CorpusManifest& manifest,
                  const std::string& out_dir, const ProgressFn& progress) {
  cfg.validate();
  const auto files_m = manifest.files(Domain::kM, Split::kTrain);
  const auto files_n = manifest.files(Domain::kN, Split::kTrain);
  if (files_m.empty() || files_n.empty()) {
    throw DataError("train: a domain has no training images (M=" +
                    std::to_string(files_m.size()) + ", N=" + std::to_string(files_n.size()) +
                    ")");
  }

  fs::create_directories(fs::path(out_dir) / "checkpoints");
  fs::create_directories(fs::path(out_dir) / "samples");
  std::ofstream loss_csv((fs::path(out_dir) / "loss_history.csv").string());
  if (!loss_csv) throw DataError("train: cannot write loss history in " + out_dir);
  loss_csv << LossRecord::csv_header() << '\n';

  TrainerState st = make_trainer(cfg);
  UnpairedBatcher batcher(files_m, files_n, mix_seed(cfg.seed, 7));

  std::unordered_map<std::string, ImageSample> cache;
  auto fetch = [&](const std::string& path, Domain dom) -> const ImageSample& {
    auto it = cache.find(path);
    if (it == cache.end()) {
      ImageSample s = resize_to(load_image(path, dom), cfg.image_size);
      it = cache.emplace(path, std::move(s)).first;
    }
    return it->second;
  };

  TrainResult result;
  std::size_t step = 0;
  bool stopped = false;
  char name[64];
  for (std::size_t epoch = 1; epoch <= cfg.epochs && !stopped; ++epoch) {
    batcher.start_epoch();
    for (std::size_t s = 0; s < batcher.steps_per_epoch(); ++s) {
      if (cfg.max_steps > 0 && step >= cfg.max_steps) {
        stopped = true;
        break;
      }
      const auto [path_m, path_n] = batcher.pair_at(s);
      LossRecord rec = train_step(st, fetch(path_m, Domain::kM), fetch(path_n, Domain::kN), cfg);
      rec.step = ++step;
      rec.epoch = epoch;
      loss_csv << rec.csv_row() << '\n';
      result.history.push_back(rec);
      if (progress) progress(rec);
      if (!rec.finite()) {
        loss_csv.flush();
        throw NumericError("train: non-finite loss at step " + std::to_string(rec.step) +
                           " (diagnostic record logged)");
      }
    }
    const bool last = epoch == cfg.epochs || stopped;
    if (cfg.checkpoint_every > 0 && (epoch % cfg.checkpoint_every == 0) && !last) {
      std::snprintf(name, sizeof(name), "epoch_%04zu.fgan", epoch);
      save_cyclegan(st.nets, checkpoint_meta(cfg, epoch, step),
                    (fs::path(out_dir) / "checkpoints" / name).string());
    }
    if (cfg.sample_every > 0 && ((epoch % cfg.sample_every == 0) || last)) {
      const auto& m_in = fetch(files_m.front(), Domain::kM);
      const auto& n_in = fetch(files_n.front(), Domain::kN);
      const ImageU8 grid = image_grid({
          {to_image_u8(m_in.data), to_image_u8(translate(st.nets.g_n, m_in).data)},
          {to_image_u8(n_in.data), to_image_u8(translate(st.nets.g_m, n_in).data)},
      });
      std::snprintf(name, sizeof(name), "epoch_%04zu.png", epoch);
      write_png_rgb8((fs::path(out_dir) / "samples" / name).string(), grid);
    }
  }

  result.final_checkpoint = (fs::path(out_dir) / "checkpoints" / "final.fgan").string();
  const std::size_t final_epoch = std::min(cfg.epochs, result.history.empty()
                                                           ? std::size_t(1)
                                                           : result.history.back().epoch);
  save_cyclegan(st.nets, checkpoint_meta(cfg, final_epoch, step), result.final_checkpoint);
  loss_csv.flush();
  return result;
}

}  // namespace fgan
