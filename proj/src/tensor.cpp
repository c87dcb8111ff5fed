#include "deskmri/tensor.hpp"

#include <fftw3.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <tuple>

namespace deskmri {

double norm2(const CTensor& t) {
  double acc = 0.0;
  for (const auto& v : t.data) {
    acc += static_cast<double>(v.real()) * v.real() +
           static_cast<double>(v.imag()) * v.imag();
  }
  return std::sqrt(acc);
}

std::complex<double> vdot(const CTensor& a, const CTensor& b) {
  if (!a.same_shape(b)) throw ShapeError("vdot: shape mismatch");
  std::complex<double> acc{0.0, 0.0};
  for (std::size_t i = 0; i < a.size(); ++i) {
    acc += std::conj(std::complex<double>(a.data[i])) *
           std::complex<double>(b.data[i]);
  }
  return acc;
}

void check_finite(const CTensor& t, const char* where) {
  for (const auto& v : t.data) {
    if (!std::isfinite(v.real()) || !std::isfinite(v.imag()))
      throw NumericError(std::string(where) + ": non-finite value");
  }
}

namespace {

// FFTW plans are not thread-safe to create; execution with the new-array
// interface is. One cached plan per (h, w, sign), planned FFTW_UNALIGNED so it
// can run on any buffer.
class PlanCache {
 public:
  static fftw_plan get(std::size_t h, std::size_t w, int sign) {
    static PlanCache cache;
    std::lock_guard<std::mutex> lock(cache.mu_);
    auto key = std::make_tuple(h, w, sign);
    auto it = cache.plans_.find(key);
    if (it != cache.plans_.end()) return it->second;
    std::vector<std::complex<double>> scratch(h * w);
    fftw_plan p = fftw_plan_dft_2d(
        static_cast<int>(h), static_cast<int>(w),
        reinterpret_cast<fftw_complex*>(scratch.data()),
        reinterpret_cast<fftw_complex*>(scratch.data()), sign,
        FFTW_ESTIMATE | FFTW_UNALIGNED);
    cache.plans_.emplace(key, p);
    return p;
  }

 private:
  std::mutex mu_;
  std::map<std::tuple<std::size_t, std::size_t, int>, fftw_plan> plans_;
};

// Centered transform: ifftshift -> DFT -> fftshift, folded into the copy
// passes. Center index is floor(n/2) for odd and even sizes alike.
template <class T>
void fft2c_impl(std::complex<T>* data, std::size_t h, std::size_t w,
                bool inverse) {
  const std::size_t n = h * w;
  const std::size_t ch = h / 2, cw = w / 2;
  std::vector<std::complex<double>> buf(n);
  // ifftshift: move the center sample to index 0.
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t sy = (y + ch) % h;
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t sx = (x + cw) % w;
      buf[y * w + x] = std::complex<double>(data[sy * w + sx]);
    }
  }
  fftw_plan p = PlanCache::get(h, w, inverse ? FFTW_BACKWARD : FFTW_FORWARD);
  fftw_execute_dft(p, reinterpret_cast<fftw_complex*>(buf.data()),
                   reinterpret_cast<fftw_complex*>(buf.data()));
  // fftshift + orthonormal scaling on the way out.
  const double scale = 1.0 / std::sqrt(static_cast<double>(n));
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t sy = (y + ch) % h;
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t sx = (x + cw) % w;
      const auto v = buf[y * w + x] * scale;
      data[sy * w + sx] =
          std::complex<T>(static_cast<T>(v.real()), static_cast<T>(v.imag()));
    }
  }
}

}  // namespace

template <class T>
void fft2c_raw(std::complex<T>* data, std::size_t h, std::size_t w,
               bool inverse) {
  fft2c_impl<T>(data, h, w, inverse);
}

template void fft2c_raw<float>(std::complex<float>*, std::size_t, std::size_t,
                               bool);
template void fft2c_raw<double>(std::complex<double>*, std::size_t,
                                std::size_t, bool);

namespace {

CTensor fft2c_dir(const CTensor& t, bool inverse, const char* name) {
  if (t.rank() != 2)
    throw ShapeError(std::string(name) + ": expected rank-2 input, got rank " +
                     std::to_string(t.rank()));
  CTensor out = t;
  fft2c_raw<float>(out.data.data(), out.shape[0], out.shape[1], inverse);
  check_finite(out, name);
  return out;
}

}  // namespace

CTensor fft2c(const CTensor& img) { return fft2c_dir(img, false, "fft2c"); }
CTensor ifft2c(const CTensor& ksp) { return fft2c_dir(ksp, true, "ifft2c"); }

CovarianceMatrix CovarianceMatrix::identity(std::size_t n) {
  CovarianceMatrix c;
  c.dim = n;
  c.entries.assign(n * n, {0.0, 0.0});
  for (std::size_t i = 0; i < n; ++i) c.at(i, i) = {1.0, 0.0};
  return c;
}

CovarianceMatrix CovarianceMatrix::diagonal(const std::vector<double>& d) {
  CovarianceMatrix c;
  c.dim = d.size();
  c.entries.assign(c.dim * c.dim, {0.0, 0.0});
  for (std::size_t i = 0; i < c.dim; ++i) c.at(i, i) = {d[i], 0.0};
  return c;
}

std::vector<std::complex<double>> cholesky(const CovarianceMatrix& c) {
  const std::size_t n = c.dim;
  std::vector<std::complex<double>> lower(n * n, {0.0, 0.0});
  for (std::size_t j = 0; j < n; ++j) {
    double diag = c.at(j, j).real();
    for (std::size_t k = 0; k < j; ++k) diag -= std::norm(lower[j * n + k]);
    if (!(diag > 0.0) || !std::isfinite(diag))
      throw FactorizationError("cholesky: pivot " + std::to_string(j) +
                               " not positive (matrix not positive definite)");
    const double ljj = std::sqrt(diag);
    lower[j * n + j] = {ljj, 0.0};
    for (std::size_t i = j + 1; i < n; ++i) {
      std::complex<double> s = c.at(i, j);
      for (std::size_t k = 0; k < j; ++k)
        s -= lower[i * n + k] * std::conj(lower[j * n + k]);
      lower[i * n + j] = s / ljj;
    }
  }
  return lower;
}

std::vector<std::complex<double>> forward_subst(
    const std::vector<std::complex<double>>& lower, std::size_t dim,
    const std::vector<std::complex<double>>& rhs) {
  std::vector<std::complex<double>> x(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    std::complex<double> s = rhs[i];
    for (std::size_t k = 0; k < i; ++k) s -= lower[i * dim + k] * x[k];
    x[i] = s / lower[i * dim + i];
  }
  return x;
}

namespace {

constexpr char kMagic[8] = {'C', 'X', 'T', 'E', 'N', 'S', '0', '1'};

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

void put_u64le(std::FILE* f, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  std::fwrite(b, 1, 8, f);
}

}  // namespace

void write_cxt(std::FILE* f, const CTensor& t) {
  std::fwrite(kMagic, 1, 8, f);
  const unsigned char dtype = 1, rank = static_cast<unsigned char>(t.rank());
  std::fwrite(&dtype, 1, 1, f);
  std::fwrite(&rank, 1, 1, f);
  for (auto d : t.shape) put_u64le(f, d);
  // complex64 payload: std::complex<float> is interleaved re/im; this code
  // assumes a little-endian host.
  if (!t.data.empty()) std::fwrite(t.data.data(), sizeof(cx), t.data.size(), f);
}

CTensor read_cxt(std::FILE* f, const std::string& context) {
  const long base = std::ftell(f);
  auto fail = [&](const char* what, long offset) {
    throw FormatError(context + ": " + what + " at byte " +
                      std::to_string(base + offset));
  };
  char magic[8];
  if (std::fread(magic, 1, 8, f) != 8) fail("truncated header", 0);
  if (std::memcmp(magic, kMagic, 8) != 0) fail("bad magic", 0);
  unsigned char dtype = 0, rank = 0;
  if (std::fread(&dtype, 1, 1, f) != 1) fail("truncated header", 8);
  if (dtype != 1) fail("unsupported dtype code", 8);
  if (std::fread(&rank, 1, 1, f) != 1) fail("truncated header", 9);
  std::vector<std::size_t> shape(rank);
  long off = 10;
  for (unsigned i = 0; i < rank; ++i, off += 8) {
    unsigned char b[8];
    if (std::fread(b, 1, 8, f) != 8) fail("truncated dims", off);
    std::uint64_t v = 0;
    for (int k = 7; k >= 0; --k) v = (v << 8) | b[k];
    shape[i] = static_cast<std::size_t>(v);
  }
  CTensor t(shape);
  if (t.size() > 0 &&
      std::fread(t.data.data(), sizeof(cx), t.size(), f) != t.size())
    fail("truncated payload", off);
  return t;
}

void save_tensor(const std::string& path, const CTensor& t) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("save_tensor: cannot open " + path);
  write_cxt(f.get(), t);
  if (std::ferror(f.get())) throw IoError("save_tensor: write failed: " + path);
}

CTensor load_tensor(const std::string& path) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("load_tensor: cannot open " + path);
  CTensor t = read_cxt(f.get(), "load_tensor: " + path);
  // Trailing bytes mean the file does not match its own header.
  char extra;
  if (std::fread(&extra, 1, 1, f.get()) == 1)
    throw FormatError("load_tensor: " + path + ": trailing bytes at byte " +
                      std::to_string(std::ftell(f.get()) - 1));
  return t;
}

}  // namespace deskmri
