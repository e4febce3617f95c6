#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fgan/image_io.hpp"
#include "fgan/tensor.hpp"

namespace fgan {

/// Domain M carries the unwanted artifacts; domain N is the clean target.
enum class Domain { kM, kN };
enum class Split { kTrain, kTest };

const char* to_string(Domain d);
const char* to_string(Split s);

/// Decoded image as channels x height x width fp32 in [-1, 1].
struct ImageSample {
  Tensor<float> data;  // 3 x H x W
  std::string path;
  Domain domain = Domain::kN;

  std::size_t height() const { return data.extent(1); }
  std::size_t width() const { return data.extent(2); }
};

/// 8-bit [0,255] -> fp32 [-1,1], replicating grayscale to three channels.
Tensor<float> to_chw_tensor(const ImageU8& image);
/// fp32 [-1,1] -> rounded, clamped 8-bit. Exact inverse of to_chw_tensor
/// on decoded values.
ImageU8 to_image_u8(const Tensor<float>& chw);

/// Adds/removes the leading batch axis (batch size 1).
Tensor<float> with_batch_dim(const Tensor<float>& chw);
Tensor<float> without_batch_dim(const Tensor<float>& bchw);

ImageSample load_image(const std::string& path, Domain domain = Domain::kN);

/// Bilinear square resize (aspect ratio not preserved); identity size is a
/// bitwise copy.
ImageSample resize_to(const ImageSample& image, std::size_t size);

struct ManifestEntry {
  Domain domain;
  Split split;
  std::string relative_path;
};

/// Per-file domain and train/test assignment for a two-folder corpus
/// (with_artifact/ and artifact_free/ under the root).
struct CorpusManifest {
  std::string root;
  std::uint64_t seed = 0;
  std::vector<ManifestEntry> entries;

  std::vector<std::string> files(Domain d, Split s) const;  // absolute paths
  std::size_t count(Domain d, Split s) const;

  void save(const std::string& path) const;
  static CorpusManifest load(const std::string& path, const std::string& root);
};

/// Scans corpus_root/with_artifact and corpus_root/artifact_free, shuffles
/// each domain with the seed and assigns round(fraction * n) files to test.
/// Deterministic for a fixed seed; both domains must be non-empty.
CorpusManifest split_dataset(const std::string& corpus_root, std::uint64_t seed,
                             double test_fraction);

/// Deterministic unpaired (m, n) path stream. Each epoch reshuffles both
/// domains independently; epoch length is max(|M|, |N|) and the smaller
/// domain wraps around. Pairings are positional, never semantic.
class UnpairedBatcher {
 public:
  UnpairedBatcher(std::vector<std::string> domain_m, std::vector<std::string> domain_n,
                  std::uint64_t seed);

  std::size_t steps_per_epoch() const { return steps_; }
  /// Reshuffles for the next epoch; call once per epoch in order.
  void start_epoch();
  /// Pair for a step in [0, steps_per_epoch()).
  std::pair<std::string, std::string> pair_at(std::size_t step) const;

 private:
  std::vector<std::string> m_, n_;
  std::vector<std::size_t> order_m_, order_n_;
  std::size_t steps_;
  std::mt19937 rng_;
};

// ---------------------------------------------------------------------------
// Synthetic toy corpus: retina-like discs with vessels; domain M adds a
// saturating flare blob plus a strong border vignette to domain-N content.
// Keeps the repo testable without any clinical download.
// ---------------------------------------------------------------------------

struct ToyCorpusConfig {
  std::size_t per_domain = 64;
  std::size_t image_size = 32;
  std::size_t test_pairs = 20;       // held-out (clean, artifacted, mask) triples
  std::size_t niqe_fit_images = 50;  // extra clean images for metric fitting
  std::uint64_t seed = 7;
};

/// Renders one clean retina-like image (values in [0, 1], RGB interleaved).
ImageU8 render_toy_clean(std::size_t size, std::mt19937& rng);

/// Applies flare + vignette; mask marks the flare core (255) vs rest (0).
struct ToyArtifacted {
  ImageU8 image;
  ImageU8 mask;
};
ToyArtifacted apply_toy_artifact(const ImageU8& clean, std::mt19937& rng);

/// Writes with_artifact/, artifact_free/, test/ (paired *_clean.png,
/// *_artifact.png, *_mask.png) and niqe_fit/ under out_dir.
void make_toy_corpus(const std::string& out_dir, const ToyCorpusConfig& cfg);

}  // namespace fgan
