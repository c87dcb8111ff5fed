#include "deskmri/network.hpp"

#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <memory>

namespace deskmri::nn {

void validate(const NetConfig& cfg) {
  if (cfg.level_channels.empty())
    throw ConfigError("network config: depth must be >= 1");
  for (int c : cfg.level_channels)
    if (c < 1) throw ConfigError("network config: channels must be >= 1");
  if (cfg.in_ch < 1 || cfg.out_ch < 1)
    throw ConfigError("network config: in/out channels must be >= 1");
  if (cfg.kernel < 1 || cfg.kernel % 2 == 0)
    throw ConfigError("network config: kernel must be odd and >= 1");
  if (!(cfg.input_gain > 0.0) || !std::isfinite(cfg.input_gain))
    throw ConfigError("network config: input_gain must be positive finite");
}

std::vector<ParamBlock> parameter_blocks(const NetConfig& cfg) {
  validate(cfg);
  std::vector<ParamBlock> blocks;
  std::size_t offset = 0;
  const std::size_t k = static_cast<std::size_t>(cfg.kernel);
  auto push_conv = [&](const std::string& name, std::size_t cout,
                       std::size_t cin, std::size_t kk) {
    blocks.push_back({name + ".w", offset, {cout, cin, kk, kk}});
    offset += cout * cin * kk * kk;
    blocks.push_back({name + ".b", offset, {cout}});
    offset += cout;
  };
  const int levels = static_cast<int>(cfg.level_channels.size());
  for (int l = 0; l < levels; ++l) {
    const std::size_t cl = static_cast<std::size_t>(cfg.level_channels[l]);
    const std::size_t prev =
        l == 0 ? static_cast<std::size_t>(cfg.in_ch)
               : static_cast<std::size_t>(cfg.level_channels[l - 1]);
    const std::string base = "enc" + std::to_string(l);
    push_conv(base + ".conv0", cl, prev, k);
    push_conv(base + ".conv1", cl, cl, k);
  }
  for (int l = levels - 2; l >= 0; --l) {
    const std::size_t cl = static_cast<std::size_t>(cfg.level_channels[l]);
    const std::size_t cup = static_cast<std::size_t>(cfg.level_channels[l + 1]);
    const std::string base = "dec" + std::to_string(l);
    push_conv(base + ".conv0", cl, cup + cl, k);
    push_conv(base + ".conv1", cl, cl, k);
  }
  push_conv("head", static_cast<std::size_t>(cfg.out_ch),
            static_cast<std::size_t>(cfg.level_channels[0]), 1);
  return blocks;
}

std::size_t parameter_count(const NetConfig& cfg) {
  const auto blocks = parameter_blocks(cfg);
  const auto& last = blocks.back();
  return last.offset + last.size();
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

std::string join_channels(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

std::vector<int> split_channels(const std::string& s) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos < s.size()) {
    std::size_t comma = s.find(',', pos);
    if (comma == std::string::npos) comma = s.size();
    out.push_back(std::stoi(s.substr(pos, comma - pos)));
    pos = comma + 1;
  }
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path, const Network<float>& net,
                     const CheckpointExtras& extras) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("save_checkpoint: cannot open " + path);
  std::fprintf(f.get(), "deskmri-checkpoint 1\n");
  std::fprintf(f.get(), "in_ch %d\n", net.cfg.in_ch);
  std::fprintf(f.get(), "out_ch %d\n", net.cfg.out_ch);
  std::fprintf(f.get(), "levels %s\n",
               join_channels(net.cfg.level_channels).c_str());
  std::fprintf(f.get(), "kernel %d\n", net.cfg.kernel);
  std::fprintf(f.get(), "input_gain %.17g\n", net.cfg.input_gain);
  std::fprintf(f.get(), "net_seed %" PRIu64 "\n",
               static_cast<std::uint64_t>(net.cfg.seed));
  std::fprintf(f.get(), "steps %ld\n", extras.steps);
  for (const auto& [k, v] : extras.scalars)
    std::fprintf(f.get(), "scalar %s %.17g\n", k.c_str(), v);
  std::fprintf(f.get(), "blocks %zu\n", net.blocks.size());
  for (const auto& b : net.blocks) {
    std::fprintf(f.get(), "%s", b.name.c_str());
    for (auto d : b.shape)
      std::fprintf(f.get(), " %zu", static_cast<std::size_t>(d));
    std::fprintf(f.get(), "\n");
  }
  std::fprintf(f.get(), "payload\n");
  for (const auto& b : net.blocks) {
    CTensor t(b.shape);
    for (std::size_t i = 0; i < b.size(); ++i)
      t.data[i] = cx(net.theta[b.offset + i], 0.0f);
    write_cxt(f.get(), t);
  }
  if (std::ferror(f.get()))
    throw IoError("save_checkpoint: write failed: " + path);
}

Network<float> load_checkpoint(const std::string& path,
                               CheckpointExtras* extras) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("load_checkpoint: cannot open " + path);
  auto read_line = [&]() {
    char buf[512];
    if (!std::fgets(buf, sizeof(buf), f.get()))
      throw FormatError("load_checkpoint: truncated header in " + path);
    std::string s(buf);
    while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
    return s;
  };
  if (read_line() != "deskmri-checkpoint 1")
    throw FormatError("load_checkpoint: bad header magic in " + path);
  NetConfig cfg;
  CheckpointExtras ex;
  std::size_t n_blocks = 0;
  for (;;) {
    std::string line = read_line();
    const std::size_t sp = line.find(' ');
    const std::string key = line.substr(0, sp);
    const std::string rest = sp == std::string::npos ? "" : line.substr(sp + 1);
    if (key == "in_ch") {
      cfg.in_ch = std::stoi(rest);
    } else if (key == "out_ch") {
      cfg.out_ch = std::stoi(rest);
    } else if (key == "levels") {
      cfg.level_channels = split_channels(rest);
    } else if (key == "kernel") {
      cfg.kernel = std::stoi(rest);
    } else if (key == "input_gain") {
      cfg.input_gain = std::stod(rest);
    } else if (key == "net_seed") {
      cfg.seed = std::stoull(rest);
    } else if (key == "steps") {
      ex.steps = std::stol(rest);
    } else if (key == "scalar") {
      const std::size_t sp2 = rest.find(' ');
      ex.scalars[rest.substr(0, sp2)] = std::stod(rest.substr(sp2 + 1));
    } else if (key == "blocks") {
      n_blocks = std::stoul(rest);
      break;
    } else {
      throw FormatError("load_checkpoint: unknown header key '" + key +
                        "' in " + path);
    }
  }
  Network<float> net;
  net.cfg = cfg;
  net.blocks = parameter_blocks(cfg);
  if (net.blocks.size() != n_blocks)
    throw FormatError("load_checkpoint: block count mismatch in " + path);
  for (std::size_t i = 0; i < n_blocks; ++i) read_line();  // table is derived
  if (read_line() != "payload")
    throw FormatError("load_checkpoint: missing payload marker in " + path);
  net.theta.assign(parameter_count(cfg), 0.0f);
  for (const auto& b : net.blocks) {
    CTensor t = read_cxt(f.get(), "load_checkpoint: " + path + ": " + b.name);
    if (t.shape != b.shape)
      throw FormatError("load_checkpoint: block shape mismatch for " + b.name +
                        " in " + path);
    for (std::size_t i = 0; i < b.size(); ++i)
      net.theta[b.offset + i] = t.data[i].real();
  }
  if (extras) *extras = ex;
  return net;
}

}  // namespace deskmri::nn
