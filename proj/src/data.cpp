#include "fgan/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace fgan {

const char* to_string(Domain d) { return d == Domain::kM ? "M" : "N"; }
const char* to_string(Split s) { return s == Split::kTrain ? "train" : "test"; }

Tensor<float> to_chw_tensor(const ImageU8& image) {
  const std::size_t h = image.height, w = image.width;
  Tensor<float> t = Tensor<float>::zeros({3, h, w});
  auto v = t.values();
  constexpr float kScale = 2.0f / 255.0f;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        v[(c * h + y) * w + x] = static_cast<float>(image.at(y, x, c)) * kScale - 1.0f;
      }
    }
  }
  return t;
}

ImageU8 to_image_u8(const Tensor<float>& chw) {
  if (chw.rank() != 3 || chw.extent(0) != 3) {
    throw ShapeError("to_image_u8: expected 3 x H x W, got " + shape_str(chw.shape()));
  }
  const std::size_t h = chw.extent(1), w = chw.extent(2);
  ImageU8 img;
  img.width = w;
  img.height = h;
  img.pixels.resize(h * w * 3);
  auto v = chw.values();
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const float f = (v[(c * h + y) * w + x] + 1.0f) * (255.0f / 2.0f);
        const long q = std::lround(f);
        img.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(q, 0L, 255L));
      }
    }
  }
  return img;
}

Tensor<float> with_batch_dim(const Tensor<float>& chw) {
  Shape s = chw.shape();
  s.insert(s.begin(), 1);
  return reshape(chw, s);
}

Tensor<float> without_batch_dim(const Tensor<float>& bchw) {
  if (bchw.rank() != 4 || bchw.extent(0) != 1) {
    throw ShapeError("without_batch_dim: expected 1 x C x H x W, got " +
                     shape_str(bchw.shape()));
  }
  return reshape(bchw, {bchw.extent(1), bchw.extent(2), bchw.extent(3)});
}

ImageSample load_image(const std::string& path, Domain domain) {
  ImageSample s;
  s.data = to_chw_tensor(read_image_rgb8(path));
  s.path = path;
  s.domain = domain;
  return s;
}

ImageSample resize_to(const ImageSample& image, std::size_t size) {
  if (size < 16) throw ConfigError("resize_to: size must be >= 16");
  ImageSample out;
  out.path = image.path;
  out.domain = image.domain;
  const std::size_t h = image.height(), w = image.width();
  if (h == size && w == size) {
    out.data = image.data.clone_values();
    return out;
  }
  out.data = Tensor<float>::zeros({3, size, size});
  auto src = image.data.values();
  auto dst = out.data.values();
  const float sy_scale = static_cast<float>(h) / static_cast<float>(size);
  const float sx_scale = static_cast<float>(w) / static_cast<float>(size);
  for (std::size_t y = 0; y < size; ++y) {
    float sy = (static_cast<float>(y) + 0.5f) * sy_scale - 0.5f;
    sy = std::clamp(sy, 0.0f, static_cast<float>(h - 1));
    const std::size_t y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const float fy = sy - static_cast<float>(y0);
    for (std::size_t x = 0; x < size; ++x) {
      float sx = (static_cast<float>(x) + 0.5f) * sx_scale - 0.5f;
      sx = std::clamp(sx, 0.0f, static_cast<float>(w - 1));
      const std::size_t x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const float fx = sx - static_cast<float>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const float v00 = src[(c * h + y0) * w + x0];
        const float v01 = src[(c * h + y0) * w + x1];
        const float v10 = src[(c * h + y1) * w + x0];
        const float v11 = src[(c * h + y1) * w + x1];
        const float top = v00 + (v01 - v00) * fx;
        const float bot = v10 + (v11 - v10) * fx;
        dst[(c * size + y) * size + x] = top + (bot - top) * fy;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

std::vector<std::string> CorpusManifest::files(Domain d, Split s) const {
  std::vector<std::string> out;
  for (const auto& e : entries) {
    if (e.domain == d && e.split == s) out.push_back((fs::path(root) / e.relative_path).string());
  }
  return out;
}

std::size_t CorpusManifest::count(Domain d, Split s) const {
  std::size_t n = 0;
  for (const auto& e : entries) {
    if (e.domain == d && e.split == s) ++n;
  }
  return n;
}

void CorpusManifest::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest: " + path);
  for (const auto& e : entries) {
    out << to_string(e.domain) << '\t' << to_string(e.split) << '\t' << e.relative_path
        << '\n';
  }
}

CorpusManifest CorpusManifest::load(const std::string& path, const std::string& root) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read manifest: " + path);
  CorpusManifest m;
  m.root = root;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string dom, split, rel;
    if (!std::getline(ls, dom, '\t') || !std::getline(ls, split, '\t') ||
        !std::getline(ls, rel)) {
      throw DataError("manifest " + path + " line " + std::to_string(line_no) +
                      ": expected domain<TAB>split<TAB>path");
    }
    ManifestEntry e;
    if (dom == "M") {
      e.domain = Domain::kM;
    } else if (dom == "N") {
      e.domain = Domain::kN;
    } else {
      throw DataError("manifest " + path + " line " + std::to_string(line_no) +
                      ": unknown domain '" + dom + "'");
    }
    if (split == "train") {
      e.split = Split::kTrain;
    } else if (split == "test") {
      e.split = Split::kTest;
    } else {
      throw DataError("manifest " + path + " line " + std::to_string(line_no) +
                      ": unknown split '" + split + "'");
    }
    e.relative_path = rel;
    m.entries.push_back(std::move(e));
  }
  return m;
}

namespace {

bool has_image_extension(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::vector<std::string> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) {
    throw DataError("missing corpus directory: " + dir.string());
  }
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && has_image_extension(entry.path())) {
      names.push_back(entry.path().filename().string());
    }
  }
  std::sort(names.begin(), names.end());
  return names;
}

}  // namespace

CorpusManifest split_dataset(const std::string& corpus_root, std::uint64_t seed,
                             double test_fraction) {
  if (test_fraction < 0.0 || test_fraction >= 1.0) {
    throw ConfigError("split_dataset: test_fraction must lie in [0, 1)");
  }
  const fs::path root(corpus_root);
  CorpusManifest m;
  m.root = corpus_root;
  m.seed = seed;

  const struct {
    Domain domain;
    const char* dir;
    std::uint32_t tag;
  } kDomains[] = {{Domain::kM, "with_artifact", 0x4d}, {Domain::kN, "artifact_free", 0x4e}};

  for (const auto& spec : kDomains) {
    auto names = list_images(root / spec.dir);
    if (names.empty()) {
      throw DataError("empty domain: no images under " + (root / spec.dir).string());
    }
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      spec.tag};
    std::mt19937 rng(seq);
    std::vector<std::size_t> order(names.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t n_test =
        static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(names.size())));
    std::vector<Split> split(names.size(), Split::kTrain);
    for (std::size_t i = 0; i < n_test && i < order.size(); ++i) split[order[i]] = Split::kTest;
    for (std::size_t i = 0; i < names.size(); ++i) {
      m.entries.push_back({spec.domain, split[i], (fs::path(spec.dir) / names[i]).string()});
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Unpaired batcher
// ---------------------------------------------------------------------------

UnpairedBatcher::UnpairedBatcher(std::vector<std::string> domain_m,
                                 std::vector<std::string> domain_n, std::uint64_t seed)
    : m_(std::move(domain_m)), n_(std::move(domain_n)), rng_(static_cast<std::uint32_t>(seed)) {
  if (m_.empty() || n_.empty()) {
    throw DataError("unpaired batcher: both domains need at least one image (M=" +
                    std::to_string(m_.size()) + ", N=" + std::to_string(n_.size()) + ")");
  }
  steps_ = std::max(m_.size(), n_.size());
  order_m_.resize(m_.size());
  order_n_.resize(n_.size());
  for (std::size_t i = 0; i < m_.size(); ++i) order_m_[i] = i;
  for (std::size_t i = 0; i < n_.size(); ++i) order_n_[i] = i;
}

void UnpairedBatcher::start_epoch() {
  std::shuffle(order_m_.begin(), order_m_.end(), rng_);
  std::shuffle(order_n_.begin(), order_n_.end(), rng_);
}

std::pair<std::string, std::string> UnpairedBatcher::pair_at(std::size_t step) const {
  if (step >= steps_) {
    throw DataError("unpaired batcher: step " + std::to_string(step) + " beyond epoch length " +
                    std::to_string(steps_));
  }
  return {m_[order_m_[step % m_.size()]], n_[order_n_[step % n_.size()]]};
}

// ---------------------------------------------------------------------------
// Toy corpus
// ---------------------------------------------------------------------------

namespace {

struct FloatImage {
  std::size_t size;
  std::vector<float> px;  // size*size*3, interleaved

  explicit FloatImage(std::size_t s) : size(s), px(s * s * 3, 0.0f) {}
  float& at(std::size_t y, std::size_t x, std::size_t c) { return px[(y * size + x) * 3 + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const {
    return px[(y * size + x) * 3 + c];
  }
};

float smoothstep(float lo, float hi, float v) {
  const float t = std::clamp((v - lo) / (hi - lo), 0.0f, 1.0f);
  return t * t * (3.0f - 2.0f * t);
}

// Bilinearly upsampled coarse random grid; gives the retina a mottled look.
struct ValueNoise {
  std::size_t grid;
  std::vector<float> cells;

  ValueNoise(std::size_t grid_size, std::mt19937& rng) : grid(grid_size) {
    std::uniform_real_distribution<float> d(-1.0f, 1.0f);
    cells.resize(grid * grid);
    for (auto& c : cells) c = d(rng);
  }
  float sample(float u, float v) const {  // u, v in [0, 1]
    const float gx = u * static_cast<float>(grid - 1);
    const float gy = v * static_cast<float>(grid - 1);
    const std::size_t x0 = std::min(static_cast<std::size_t>(gx), grid - 2);
    const std::size_t y0 = std::min(static_cast<std::size_t>(gy), grid - 2);
    const float fx = gx - static_cast<float>(x0);
    const float fy = gy - static_cast<float>(y0);
    const float a = cells[y0 * grid + x0], b = cells[y0 * grid + x0 + 1];
    const float c = cells[(y0 + 1) * grid + x0], d = cells[(y0 + 1) * grid + x0 + 1];
    return (a + (b - a) * fx) * (1 - fy) + (c + (d - c) * fx) * fy;
  }
};

ImageU8 quantize(const FloatImage& f) {
  ImageU8 img;
  img.width = f.size;
  img.height = f.size;
  img.pixels.resize(f.size * f.size * 3);
  for (std::size_t i = 0; i < f.px.size(); ++i) {
    img.pixels[i] =
        static_cast<std::uint8_t>(std::clamp(std::lround(f.px[i] * 255.0f), 0L, 255L));
  }
  return img;
}

FloatImage to_float(const ImageU8& img) {
  FloatImage f(img.width);
  for (std::size_t i = 0; i < f.px.size(); ++i) {
    f.px[i] = static_cast<float>(img.pixels[i]) / 255.0f;
  }
  return f;
}

}  // namespace

ImageU8 render_toy_clean(std::size_t size, std::mt19937& rng) {
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  std::normal_distribution<float> gauss(0.0f, 1.0f);
  FloatImage img(size);
  const float s = static_cast<float>(size);

  const float cx = (0.45f + 0.10f * unit(rng)) * s;
  const float cy = (0.45f + 0.10f * unit(rng)) * s;
  const float radius = (0.40f + 0.06f * unit(rng)) * s;
  const float base_r = 0.50f + 0.12f * unit(rng);
  const float base_g = 0.18f + 0.07f * unit(rng);
  const float base_b = 0.06f + 0.04f * unit(rng);
  ValueNoise tex(7, rng);

  const float od_angle = 2.0f * 3.14159265f * unit(rng);
  const float od_x = cx + 0.55f * radius * std::cos(od_angle);
  const float od_y = cy + 0.55f * radius * std::sin(od_angle);
  const float od_radius = (0.09f + 0.03f * unit(rng)) * s;

  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const float dx = static_cast<float>(x) - cx;
      const float dy = static_cast<float>(y) - cy;
      const float r = std::sqrt(dx * dx + dy * dy);
      float cr = 0.05f, cg = 0.05f, cb = 0.06f;  // background
      if (r < radius) {
        const float fall = 1.0f - 0.35f * (r / radius) * (r / radius);
        const float mod =
            1.0f + 0.20f * tex.sample(static_cast<float>(x) / s, static_cast<float>(y) / s);
        const float edge = 1.0f - smoothstep(radius - 1.5f, radius, r);
        cr += edge * (base_r * fall * mod - cr);
        cg += edge * (base_g * fall * mod - cg);
        cb += edge * (base_b * fall * mod - cb);
      }
      const float od_d = std::sqrt((static_cast<float>(x) - od_x) * (static_cast<float>(x) - od_x) +
                                   (static_cast<float>(y) - od_y) * (static_cast<float>(y) - od_y));
      const float od = 1.0f - smoothstep(od_radius * 0.6f, od_radius, od_d);
      cr += od * (0.88f - cr);
      cg += od * (0.78f - cg);
      cb += od * (0.42f - cb);
      img.at(y, x, 0) = cr;
      img.at(y, x, 1) = cg;
      img.at(y, x, 2) = cb;
    }
  }

  // Vessels: short random walks radiating from the optic disc.
  const int n_vessels = 4 + static_cast<int>(unit(rng) * 3.0f);
  for (int v = 0; v < n_vessels; ++v) {
    float px = od_x, py = od_y;
    float angle = 2.0f * 3.14159265f * unit(rng);
    const int steps = static_cast<int>((0.7f + 0.5f * unit(rng)) * radius);
    const float thick = 0.5f + 0.7f * unit(rng);
    for (int st = 0; st < steps; ++st) {
      angle += 0.22f * gauss(rng);
      px += std::cos(angle);
      py += std::sin(angle);
      const int ix = static_cast<int>(std::lround(px));
      const int iy = static_cast<int>(std::lround(py));
      for (int oy = -1; oy <= 1; ++oy) {
        for (int ox = -1; ox <= 1; ++ox) {
          const int qx = ix + ox, qy = iy + oy;
          if (qx < 0 || qy < 0 || qx >= static_cast<int>(size) || qy >= static_cast<int>(size))
            continue;
          const float d2 = static_cast<float>(ox * ox + oy * oy);
          const float blend = 0.75f * std::exp(-d2 / (2.0f * thick * thick));
          auto& r = img.at(static_cast<std::size_t>(qy), static_cast<std::size_t>(qx), 0);
          auto& g = img.at(static_cast<std::size_t>(qy), static_cast<std::size_t>(qx), 1);
          auto& b = img.at(static_cast<std::size_t>(qy), static_cast<std::size_t>(qx), 2);
          r += blend * (0.24f - r);
          g += blend * (0.05f - g);
          b += blend * (0.05f - b);
        }
      }
    }
  }

  // Sensor-like grain keeps blocks spatially active for the quality metrics.
  for (auto& p : img.px) p = std::clamp(p + 0.022f * gauss(rng), 0.0f, 1.0f);
  return quantize(img);
}

ToyArtifacted apply_toy_artifact(const ImageU8& clean, std::mt19937& rng) {
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  FloatImage img = to_float(clean);
  const std::size_t size = img.size;
  const float s = static_cast<float>(size);

  // Strong border vignette: crushes the rim toward black.
  const float depth = 0.85f + 0.10f * unit(rng);
  const float r_in = 0.62f + 0.08f * unit(rng);
  const float r_out = r_in + 0.45f;
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const float nx = (static_cast<float>(x) - 0.5f * s) / (0.5f * s);
      const float ny = (static_cast<float>(y) - 0.5f * s) / (0.5f * s);
      const float rn = std::sqrt(nx * nx + ny * ny);
      const float dim = 1.0f - depth * smoothstep(r_in, r_out, rn);
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) *= dim;
    }
  }

  // Saturating flare blob; its core is the structural artifact region.
  const float fx = (0.30f + 0.40f * unit(rng)) * s;
  const float fy = (0.30f + 0.40f * unit(rng)) * s;
  const float sigma = (0.12f + 0.08f * unit(rng)) * s;
  const float amp = 1.1f + 0.5f * unit(rng);
  ImageU8 mask;
  mask.width = size;
  mask.height = size;
  mask.pixels.assign(size * size * 3, 0);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const float dx = static_cast<float>(x) - fx;
      const float dy = static_cast<float>(y) - fy;
      const float glow = amp * std::exp(-(dx * dx + dy * dy) / (2.0f * sigma * sigma));
      for (std::size_t c = 0; c < 3; ++c) {
        img.at(y, x, c) = std::clamp(img.at(y, x, c) + glow, 0.0f, 1.0f);
      }
      if (glow >= 0.35f) {
        for (std::size_t c = 0; c < 3; ++c) mask.at(y, x, c) = 255;
      }
    }
  }
  return {quantize(img), std::move(mask)};
}

void make_toy_corpus(const std::string& out_dir, const ToyCorpusConfig& cfg) {
  const fs::path root(out_dir);
  fs::create_directories(root / "with_artifact");
  fs::create_directories(root / "artifact_free");
  fs::create_directories(root / "test");
  fs::create_directories(root / "niqe_fit");

  std::mt19937 master(static_cast<std::uint32_t>(cfg.seed));
  auto next_rng = [&master]() { return std::mt19937(master()); };
  char name[64];

  for (std::size_t i = 0; i < cfg.per_domain; ++i) {
    auto rng = next_rng();
    std::snprintf(name, sizeof(name), "n_%04zu.png", i);
    write_png_rgb8((root / "artifact_free" / name).string(),
                   render_toy_clean(cfg.image_size, rng));
  }
  for (std::size_t i = 0; i < cfg.per_domain; ++i) {
    auto rng = next_rng();
    ImageU8 clean = render_toy_clean(cfg.image_size, rng);
    auto art = apply_toy_artifact(clean, rng);
    std::snprintf(name, sizeof(name), "m_%04zu.png", i);
    write_png_rgb8((root / "with_artifact" / name).string(), art.image);
  }
  for (std::size_t i = 0; i < cfg.test_pairs; ++i) {
    auto rng = next_rng();
    ImageU8 clean = render_toy_clean(cfg.image_size, rng);
    auto art = apply_toy_artifact(clean, rng);
    std::snprintf(name, sizeof(name), "t_%03zu_clean.png", i);
    write_png_rgb8((root / "test" / name).string(), clean);
    std::snprintf(name, sizeof(name), "t_%03zu_artifact.png", i);
    write_png_rgb8((root / "test" / name).string(), art.image);
    std::snprintf(name, sizeof(name), "t_%03zu_mask.png", i);
    write_png_rgb8((root / "test" / name).string(), art.mask);
  }
  for (std::size_t i = 0; i < cfg.niqe_fit_images; ++i) {
    auto rng = next_rng();
    std::snprintf(name, sizeof(name), "f_%03zu.png", i);
    write_png_rgb8((root / "niqe_fit" / name).string(),
                   render_toy_clean(cfg.image_size, rng));
  }
}

}  // namespace fgan
