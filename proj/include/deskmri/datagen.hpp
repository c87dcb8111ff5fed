#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "deskmri/tensor.hpp"

namespace deskmri::datagen {

struct Ellipse {
  double cy, cx;      // center, pixels
  double ay, ax;      // semi-axes, pixels
  double angle;       // radians
  double intensity;
};

/* Synthetic ground truth: 3-8 overlapping ellipses, magnitude clamped to
 * [0, 1.5], plus a band-limited spatial phase. Deterministic per seed. */
struct Phantom {
  CTensor image;  // [H,W]
  std::uint64_t seed = 0;
  std::vector<Ellipse> ellipses;
};

Phantom gen_phantom(std::size_t h, std::size_t w, std::uint64_t seed);

struct SampleRecord {
  std::string id;
  std::string kspace_path;
  std::string maps_path;
  std::string clean_path;  // "-" when absent
  double sigma_sq = 0.0;
  double snr_db = 0.0;
  std::string split;
};

struct DatasetManifest {
  std::vector<SampleRecord> samples;
};

void save_manifest(const std::string& path, const DatasetManifest& m);
DatasetManifest load_manifest(const std::string& path);

struct DatasetConfig {
  int n = 200;
  std::size_t h = 64, w = 64;
  int nc = 4;
  double snr_db = 32.0;
  std::size_t acs_size = 8;
  std::uint64_t seed = 0;
  std::string split = "train";
};

/* Per sample: phantom -> sensitivities -> fully sampled k-space -> ACS
 * normalization from the clean signal -> white complex noise at exactly the
 * target post-normalization variance 10^(-SNR/10). Files land in out_dir;
 * clean images are stored in the same normalized units as the k-space.
 * Per-sample seed = cfg.seed + index; sub-seeds are 4*sample_seed + {0,1,2}
 * for phantom, maps, noise. */
DatasetManifest build_dataset(const DatasetConfig& cfg,
                              const std::string& out_dir);

/* Adds white complex noise with variance sigma_target^2 - sigma_source^2 to
 * every stored k-space; valid only when the target SNR is strictly lower.
 * Noise seed per sample = 4*(seed + index) + 3. */
DatasetManifest degrade_to_snr(const DatasetManifest& src,
                               double target_snr_db, std::uint64_t seed,
                               const std::string& out_dir);

}  // namespace deskmri::datagen
