#include "deskmri/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "deskmri/mri.hpp"
#include "deskmri/rng.hpp"

namespace deskmri::datagen {

Phantom gen_phantom(std::size_t h, std::size_t w, std::uint64_t seed) {
  if (h < 16 || w < 16)
    throw ConfigError("gen_phantom: dimensions must be at least 16");
  Rng rng(seed);
  Phantom ph;
  ph.seed = seed;
  ph.image = CTensor({h, w});
  const int count = 3 + static_cast<int>(rng.below(6));  // 3..8
  const double scale = static_cast<double>(std::min(h, w));
  for (int e = 0; e < count; ++e) {
    Ellipse el;
    el.cy = rng.uniform(0.2, 0.8) * static_cast<double>(h);
    el.cx = rng.uniform(0.2, 0.8) * static_cast<double>(w);
    el.ay = rng.uniform(0.08, 0.32) * scale;
    el.ax = rng.uniform(0.08, 0.32) * scale;
    el.angle = rng.uniform(0.0, 3.14159265358979323846);
    el.intensity = rng.uniform(0.15, 0.8);
    ph.ellipses.push_back(el);
  }
  // Band-limited phase: a few low-frequency sinusoids, at most 2 cycles
  // across the field of view.
  struct Wave {
    double fy, fx, amp, shift;
  };
  std::vector<Wave> waves(3);
  for (auto& wv : waves) {
    wv.fy = rng.uniform(-2.0, 2.0) / static_cast<double>(h);
    wv.fx = rng.uniform(-2.0, 2.0) / static_cast<double>(w);
    wv.amp = rng.uniform(0.05, 0.4);
    wv.shift = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
  }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double mag = 0.0;
      for (const auto& el : ph.ellipses) {
        const double dy = static_cast<double>(y) - el.cy;
        const double dx = static_cast<double>(x) - el.cx;
        const double c = std::cos(el.angle), s = std::sin(el.angle);
        const double u = (c * dx + s * dy) / el.ax;
        const double v = (-s * dx + c * dy) / el.ay;
        if (u * u + v * v <= 1.0) mag += el.intensity;
      }
      mag = std::min(mag, 1.5);
      double phase = 0.0;
      for (const auto& wv : waves)
        phase += wv.amp * std::sin(2.0 * 3.14159265358979323846 *
                                       (wv.fy * y + wv.fx * x) +
                                   wv.shift);
      ph.image.at(y, x) = cx(static_cast<float>(mag * std::cos(phase)),
                             static_cast<float>(mag * std::sin(phase)));
    }
  return ph;
}

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void save_manifest(const std::string& path, const DatasetManifest& m) {
  std::ofstream f(path);
  if (!f) throw IoError("save_manifest: cannot open " + path);
  for (const auto& s : m.samples) {
    f << s.id << '\t' << s.kspace_path << '\t' << s.maps_path << '\t'
      << s.clean_path << '\t' << format_double(s.sigma_sq) << '\t'
      << format_double(s.snr_db) << '\t' << s.split << '\n';
  }
  if (!f) throw IoError("save_manifest: write failed: " + path);
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("load_manifest: cannot open " + path);
  DatasetManifest m;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    SampleRecord r;
    std::string sigma, snr;
    if (!std::getline(ss, r.id, '\t') ||
        !std::getline(ss, r.kspace_path, '\t') ||
        !std::getline(ss, r.maps_path, '\t') ||
        !std::getline(ss, r.clean_path, '\t') ||
        !std::getline(ss, sigma, '\t') || !std::getline(ss, snr, '\t') ||
        !std::getline(ss, r.split))
      throw FormatError("load_manifest: malformed record in " + path);
    r.sigma_sq = std::stod(sigma);
    r.snr_db = std::stod(snr);
    for (const std::string& p : {r.kspace_path, r.maps_path, r.clean_path})
      if (p != "-" && !std::filesystem::exists(p))
        throw DatasetError("load_manifest: sample " + r.id +
                           " references missing file " + p);
    m.samples.push_back(std::move(r));
  }
  return m;
}

DatasetManifest build_dataset(const DatasetConfig& cfg,
                              const std::string& out_dir) {
  if (cfg.n < 1) throw ConfigError("build_dataset: need n >= 1");
  std::filesystem::create_directories(out_dir);
  const double sigma_sq = mri::sigma_sq_for_snr_db(cfg.snr_db);
  DatasetManifest manifest;
  for (int i = 0; i < cfg.n; ++i) {
    const std::uint64_t sample_seed = cfg.seed + static_cast<std::uint64_t>(i);
    const std::string id = cfg.split + "_" + std::to_string(i);
    Phantom ph = gen_phantom(cfg.h, cfg.w, 4 * sample_seed + 0);
    CTensor maps =
        mri::make_sensitivities(cfg.nc, cfg.h, cfg.w, 4 * sample_seed + 1);
    mri::ForwardModel fm;
    fm.maps = maps;
    fm.mask = mri::make_mask(cfg.w, 1, 0, 0);  // fully sampled
    CTensor kspace = mri::apply_A(fm, ph.image);
    auto [kspace_norm, q] = mri::normalize_kspace(kspace, cfg.acs_size);
    CTensor noisy = mri::add_noise(
        kspace_norm,
        CovarianceMatrix::diagonal(std::vector<double>(cfg.nc, sigma_sq)),
        4 * sample_seed + 2);
    CTensor clean = ph.image;
    const float inv_q = static_cast<float>(1.0 / q);
    for (auto& v : clean.data) v *= inv_q;

    SampleRecord r;
    r.id = id;
    r.kspace_path = out_dir + "/" + id + "_ksp.cxt";
    r.maps_path = out_dir + "/" + id + "_maps.cxt";
    r.clean_path = out_dir + "/" + id + "_clean.cxt";
    r.sigma_sq = sigma_sq;
    r.snr_db = cfg.snr_db;
    r.split = cfg.split;
    try {
      save_tensor(r.kspace_path, noisy);
      save_tensor(r.maps_path, maps);
      save_tensor(r.clean_path, clean);
      std::ofstream meta(out_dir + "/" + id + ".meta");
      meta << "seed " << sample_seed << "\nR 1\nacs " << cfg.acs_size
           << "\nsigma_sq " << format_double(sigma_sq) << "\nsnr_db "
           << format_double(cfg.snr_db) << "\nscale " << format_double(q)
           << "\n";
    } catch (const Error& e) {
      throw DatasetError("build_dataset: sample " + id + ": " + e.what());
    }
    manifest.samples.push_back(std::move(r));
  }
  save_manifest(out_dir + "/manifest.tsv", manifest);
  return manifest;
}

DatasetManifest degrade_to_snr(const DatasetManifest& src,
                               double target_snr_db, std::uint64_t seed,
                               const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  DatasetManifest out;
  std::uint64_t index = 0;
  for (const auto& s : src.samples) {
    if (target_snr_db >= s.snr_db)
      throw ConfigError("degrade_to_snr: target " +
                        std::to_string(target_snr_db) +
                        " dB must be below source " +
                        std::to_string(s.snr_db) + " dB (sample " + s.id +
                        ")");
    const double add_var =
        mri::sigma_sq_for_snr_db(target_snr_db) - s.sigma_sq;
    CTensor kspace = load_tensor(s.kspace_path);
    CTensor noisy = mri::add_noise(
        kspace,
        CovarianceMatrix::diagonal(
            std::vector<double>(kspace.shape[0], add_var)),
        4 * (seed + index) + 3);
    SampleRecord r = s;
    r.kspace_path = out_dir + "/" + s.id + "_ksp.cxt";
    r.sigma_sq = s.sigma_sq + add_var;
    r.snr_db = target_snr_db;
    try {
      save_tensor(r.kspace_path, noisy);
    } catch (const Error& e) {
      throw DatasetError("degrade_to_snr: sample " + s.id + ": " + e.what());
    }
    out.samples.push_back(std::move(r));
    ++index;
  }
  save_manifest(out_dir + "/manifest.tsv", out);
  return out;
}

}  // namespace deskmri::datagen
