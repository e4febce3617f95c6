#include "fgan/models.hpp"

#include <cstring>
#include <fstream>

#include <zlib.h>

namespace fgan {

void GeneratorConfig::validate() const {
  if (input_channels == 0 || base_filters == 0) {
    throw ConfigError("generator: channels and filters must be positive");
  }
  if (n_res_blocks < 1) throw ConfigError("generator: n_res_blocks must be >= 1");
  if (image_size < 16 || image_size % 4 != 0) {
    throw ConfigError("generator: image_size must be >= 16 and divisible by 4, got " +
                      std::to_string(image_size));
  }
}

void DiscriminatorConfig::validate() const {
  if (filters.empty()) throw ConfigError("discriminator: filter ladder is empty");
  if (stride != 2) throw ConfigError("discriminator: stride is fixed at 2");
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

Tensor<float> ModelGraph::forward(const Tensor<float>& input) const {
  Tensor<float> h = input;
  for (const auto& nl : layers) {
    h = std::visit(
        [&h](const auto& layer) -> Tensor<float> {
          using L = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<L, ConvLayer>) {
            return conv2d(h, layer.weight, layer.bias, {layer.stride, layer.stride},
                          layer.padding);
          } else if constexpr (std::is_same_v<L, ConvTransposeLayer>) {
            return conv_transpose2d(h, layer.weight, layer.bias,
                                    {layer.stride, layer.stride}, {layer.pad, layer.pad},
                                    {layer.output_padding, layer.output_padding});
          } else if constexpr (std::is_same_v<L, InstanceNormLayer>) {
            return instance_norm(h, layer.state);
          } else if constexpr (std::is_same_v<L, LeakyReluLayer>) {
            return leaky_relu(h, layer.alpha);
          } else if constexpr (std::is_same_v<L, TanhLayer>) {
            return tanh_act(h);
          } else {
            return residual_block(h, layer.params);
          }
        },
        nl.layer);
  }
  return h;
}

std::vector<Parameter<float>> ModelGraph::parameters() {
  std::vector<Parameter<float>> out;
  auto push = [&out](const std::string& name, Tensor<float> t) {
    if (t.defined()) out.push_back({name, std::move(t)});
  };
  for (auto& nl : layers) {
    std::visit(
        [&](auto& layer) {
          using L = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<L, ConvLayer> ||
                        std::is_same_v<L, ConvTransposeLayer>) {
            push(nl.name + ".weight", layer.weight);
            push(nl.name + ".bias", layer.bias);
          } else if constexpr (std::is_same_v<L, InstanceNormLayer>) {
            if (layer.state.affine()) {
              push(nl.name + ".gamma", layer.state.gamma);
              push(nl.name + ".beta", layer.state.beta);
            }
          } else if constexpr (std::is_same_v<L, ResidualLayer>) {
            push(nl.name + ".conv1.weight", layer.params.conv1_weight);
            push(nl.name + ".conv1.bias", layer.params.conv1_bias);
            if (layer.params.norm1.affine()) {
              push(nl.name + ".norm1.gamma", layer.params.norm1.gamma);
              push(nl.name + ".norm1.beta", layer.params.norm1.beta);
            }
            push(nl.name + ".conv2.weight", layer.params.conv2_weight);
            push(nl.name + ".conv2.bias", layer.params.conv2_bias);
            if (layer.params.norm2.affine()) {
              push(nl.name + ".norm2.gamma", layer.params.norm2.gamma);
              push(nl.name + ".norm2.beta", layer.params.norm2.beta);
            }
          }
        },
        nl.layer);
  }
  return out;
}

std::size_t ModelGraph::parameter_count() {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.value.numel();
  return n;
}

void ModelGraph::set_requires_grad(bool flag) {
  for (auto& p : parameters()) p.value.set_requires_grad(flag);
}

void ModelGraph::zero_grads() {
  for (auto& p : parameters()) p.value.clear_grad();
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

namespace {

constexpr float kInitStddev = 0.02f;

Tensor<float> init_weight(Shape shape, std::mt19937& rng) {
  Tensor<float> t = Tensor<float>::zeros(std::move(shape), true);
  fill_normal(t, rng, 0.0f, kInitStddev);
  return t;
}

Tensor<float> init_bias(std::size_t n) { return Tensor<float>::zeros({n}, true); }

NormState<float> make_norm(bool affine, std::size_t channels, float delta) {
  return affine ? NormState<float>::instance_affine(channels, delta)
                : NormState<float>::instance(delta);
}

void add_conv(ModelGraph& g, const std::string& name, std::mt19937& rng,
              std::size_t in_ch, std::size_t out_ch, std::size_t k, std::size_t stride,
              const ConvPadding& pad) {
  ConvLayer layer;
  layer.weight = init_weight({out_ch, in_ch, k, k}, rng);
  layer.bias = init_bias(out_ch);
  layer.stride = stride;
  layer.padding = pad;
  g.layers.push_back({name, std::move(layer)});
}

}  // namespace

ModelGraph build_generator(const GeneratorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937 rng(static_cast<std::uint32_t>(seed));
  ModelGraph g;
  g.config_echo = {{"type", "generator"},
                   {"input_channels", cfg.input_channels},
                   {"base_filters", cfg.base_filters},
                   {"n_res_blocks", cfg.n_res_blocks},
                   {"image_size", cfg.image_size},
                   {"alpha", cfg.alpha},
                   {"norm_affine", cfg.norm_affine},
                   {"norm_delta", cfg.norm_delta}};

  const std::size_t f1 = cfg.base_filters, f2 = f1 * 2, f3 = f1 * 4;
  const auto reflect3 = ConvPadding::symmetric({3, 3}, PadMode::kReflect);
  const auto zero1 = ConvPadding::symmetric({1, 1}, PadMode::kZero);

  auto add_norm_act = [&](const std::string& name, std::size_t ch) {
    g.layers.push_back({name + ".norm", InstanceNormLayer{make_norm(cfg.norm_affine, ch,
                                                                    cfg.norm_delta)}});
    g.layers.push_back({name + ".act", LeakyReluLayer{cfg.alpha}});
  };

  add_conv(g, "enc1", rng, cfg.input_channels, f1, 7, 1, reflect3);
  add_norm_act("enc1", f1);
  add_conv(g, "enc2", rng, f1, f2, 3, 2, zero1);
  add_norm_act("enc2", f2);
  add_conv(g, "enc3", rng, f2, f3, 3, 2, zero1);
  add_norm_act("enc3", f3);

  for (std::size_t i = 0; i < cfg.n_res_blocks; ++i) {
    ResidualLayer res;
    res.params.channels = f3;
    res.params.conv1_weight = init_weight({f3, f3, 3, 3}, rng);
    res.params.conv1_bias = init_bias(f3);
    res.params.conv2_weight = init_weight({f3, f3, 3, 3}, rng);
    res.params.conv2_bias = init_bias(f3);
    res.params.norm1 = make_norm(cfg.norm_affine, f3, cfg.norm_delta);
    res.params.norm2 = make_norm(cfg.norm_affine, f3, cfg.norm_delta);
    g.layers.push_back({"res" + std::to_string(i + 1), std::move(res)});
  }

  {
    ConvTransposeLayer up;
    up.weight = init_weight({f3, f2, 3, 3}, rng);
    up.bias = init_bias(f2);
    g.layers.push_back({"dec1", std::move(up)});
    add_norm_act("dec1", f2);
  }
  {
    ConvTransposeLayer up;
    up.weight = init_weight({f2, f1, 3, 3}, rng);
    up.bias = init_bias(f1);
    g.layers.push_back({"dec2", std::move(up)});
    add_norm_act("dec2", f1);
  }

  add_conv(g, "head", rng, f1, cfg.input_channels, 7, 1, reflect3);
  g.layers.push_back({"head.act", TanhLayer{}});
  return g;
}

ModelGraph build_discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937 rng(static_cast<std::uint32_t>(seed));
  ModelGraph g;
  g.config_echo = {{"type", "discriminator"},
                   {"input_channels", cfg.input_channels},
                   {"filters", cfg.filters},
                   {"stride", cfg.stride},
                   {"alpha", cfg.alpha},
                   {"norm_affine", cfg.norm_affine},
                   {"norm_delta", cfg.norm_delta}};

  const auto zero1 = ConvPadding::symmetric({1, 1}, PadMode::kZero);
  std::size_t in_ch = cfg.input_channels;
  for (std::size_t i = 0; i < cfg.filters.size(); ++i) {
    const std::string name = "stage" + std::to_string(i + 1);
    add_conv(g, name, rng, in_ch, cfg.filters[i], 4, cfg.stride, zero1);
    if (i > 0) {
      g.layers.push_back({name + ".norm", InstanceNormLayer{make_norm(
                                              cfg.norm_affine, cfg.filters[i], cfg.norm_delta)}});
    }
    g.layers.push_back({name + ".act", LeakyReluLayer{cfg.alpha}});
    in_ch = cfg.filters[i];
  }
  // 4x4 stride-1 head; trailing-edge padding keeps the score map extent equal
  // to its input extent.
  ConvPadding same_head;
  same_head.top = 1;
  same_head.bottom = 2;
  same_head.left = 1;
  same_head.right = 2;
  same_head.mode = PadMode::kZero;
  add_conv(g, "head", rng, in_ch, 1, 4, 1, same_head);
  return g;
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'F', 'G', 'A', 'N'};

template <typename T>
void append_le(std::vector<std::uint8_t>& buf, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  const std::size_t at = buf.size();
  buf.resize(at + sizeof(T));
  std::memcpy(buf.data() + at, &value, sizeof(T));
}

struct Reader {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos = 0;

  template <typename T>
  T take(const char* what) {
    if (pos + sizeof(T) > size) {
      throw IoError("checkpoint truncated at byte " + std::to_string(pos) + " reading " +
                    what);
    }
    T v;
    std::memcpy(&v, data + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  const std::uint8_t* bytes(std::size_t n, const char* what) {
    if (pos + n > size) {
      throw IoError("checkpoint truncated at byte " + std::to_string(pos) + " reading " +
                    what);
    }
    const std::uint8_t* p = data + pos;
    pos += n;
    return p;
  }
};

}  // namespace

CheckpointTensor CheckpointTensor::from(const std::string& name, const Tensor<float>& t) {
  CheckpointTensor c;
  c.name = name;
  c.dtype = 0;
  c.shape = t.shape();
  c.raw.resize(t.numel() * sizeof(float));
  std::memcpy(c.raw.data(), t.values().data(), c.raw.size());
  return c;
}

CheckpointTensor CheckpointTensor::from(const std::string& name, const Tensor<double>& t) {
  CheckpointTensor c;
  c.name = name;
  c.dtype = 1;
  c.shape = t.shape();
  c.raw.resize(t.numel() * sizeof(double));
  std::memcpy(c.raw.data(), t.values().data(), c.raw.size());
  return c;
}

Tensor<float> CheckpointTensor::to_f32() const {
  if (dtype != 0) throw IoError("tensor '" + name + "' is not fp32");
  std::vector<float> v(raw.size() / sizeof(float));
  std::memcpy(v.data(), raw.data(), raw.size());
  return Tensor<float>::from_values(shape, std::move(v));
}

Tensor<double> CheckpointTensor::to_f64() const {
  if (dtype != 1) throw IoError("tensor '" + name + "' is not fp64");
  std::vector<double> v(raw.size() / sizeof(double));
  std::memcpy(v.data(), raw.data(), raw.size());
  return Tensor<double>::from_values(shape, std::move(v));
}

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void Checkpoint::save(const std::string& path) const {
  std::vector<std::uint8_t> buf;
  buf.insert(buf.end(), kMagic, kMagic + 4);
  append_le<std::uint16_t>(buf, kVersion);
  const std::string meta_str = meta.dump();
  append_le<std::uint32_t>(buf, static_cast<std::uint32_t>(meta_str.size()));
  buf.insert(buf.end(), meta_str.begin(), meta_str.end());
  append_le<std::uint32_t>(buf, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    append_le<std::uint16_t>(buf, static_cast<std::uint16_t>(t.name.size()));
    buf.insert(buf.end(), t.name.begin(), t.name.end());
    append_le<std::uint8_t>(buf, t.dtype);
    append_le<std::uint8_t>(buf, static_cast<std::uint8_t>(t.shape.size()));
    for (std::size_t e : t.shape) append_le<std::uint64_t>(buf, e);
    const std::size_t scalar = t.dtype == 0 ? sizeof(float) : sizeof(double);
    if (t.raw.size() != numel_of(t.shape) * scalar) {
      throw IoError("tensor '" + t.name + "': payload does not match shape");
    }
    buf.insert(buf.end(), t.raw.begin(), t.raw.end());
  }
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size())));
  append_le<std::uint32_t>(buf, crc);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("short write on checkpoint: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint: " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  if (buf.size() < 4 + 2 + 4 + 4 + 4) {
    throw IoError("checkpoint too short (" + std::to_string(buf.size()) + " bytes): " + path);
  }
  const std::size_t body = buf.size() - 4;
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, buf.data() + body, 4);
  const auto computed = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(body)));
  if (stored_crc != computed) {
    throw IoError("checkpoint checksum mismatch (file " + path + ")");
  }

  Reader r{buf.data(), body};
  const std::uint8_t* magic = r.bytes(4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError("bad magic bytes, not a checkpoint: " + path);
  }
  const auto version = r.take<std::uint16_t>("version");
  if (version != kVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version) +
                  " (expected " + std::to_string(kVersion) + ")");
  }
  Checkpoint ckpt;
  const auto meta_len = r.take<std::uint32_t>("meta length");
  const std::uint8_t* meta_bytes = r.bytes(meta_len, "meta");
  try {
    ckpt.meta = nlohmann::json::parse(meta_bytes, meta_bytes + meta_len);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint meta is not valid JSON: ") + e.what());
  }
  const auto count = r.take<std::uint32_t>("tensor count");
  ckpt.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    const auto name_len = r.take<std::uint16_t>("name length");
    const std::uint8_t* name = r.bytes(name_len, "name");
    t.name.assign(reinterpret_cast<const char*>(name), name_len);
    t.dtype = r.take<std::uint8_t>("dtype");
    if (t.dtype > 1) {
      throw IoError("tensor '" + t.name + "': unknown dtype code " +
                    std::to_string(t.dtype));
    }
    const auto rank = r.take<std::uint8_t>("rank");
    t.shape.resize(rank);
    std::size_t numel = 1;
    for (std::uint8_t a = 0; a < rank; ++a) {
      const auto e = r.take<std::uint64_t>("extent");
      if (e == 0) throw IoError("tensor '" + t.name + "': zero extent on axis " +
                                std::to_string(a));
      t.shape[a] = static_cast<std::size_t>(e);
      numel *= t.shape[a];
    }
    const std::size_t scalar = t.dtype == 0 ? sizeof(float) : sizeof(double);
    const std::uint8_t* payload = r.bytes(numel * scalar, "payload");
    t.raw.assign(payload, payload + numel * scalar);
    ckpt.tensors.push_back(std::move(t));
  }
  if (r.pos != body) {
    throw IoError("checkpoint has " + std::to_string(body - r.pos) +
                  " unexpected trailing bytes before checksum");
  }
  return ckpt;
}

void append_model(Checkpoint& ckpt, ModelGraph& model) {
  for (auto& p : model.parameters()) {
    ckpt.tensors.push_back(CheckpointTensor::from(model.role + "." + p.name, p.value));
  }
}

void load_model(const Checkpoint& ckpt, ModelGraph& model) {
  for (auto& p : model.parameters()) {
    const std::string full = model.role + "." + p.name;
    const CheckpointTensor* t = ckpt.find(full);
    if (!t) throw IoError("checkpoint is missing tensor '" + full + "'");
    if (t->dtype != 0) throw IoError("tensor '" + full + "' has unexpected dtype");
    if (t->shape != p.value.shape()) {
      throw ShapeError("checkpoint tensor '" + full + "' has shape " + shape_str(t->shape) +
                       " but the model expects " + shape_str(p.value.shape()));
    }
    std::memcpy(p.value.values().data(), t->raw.data(), t->raw.size());
  }
}

}  // namespace fgan
