#include <bit>
#include <cmath>
#include <fstream>
#include <json.hpp>

#include "neas/checkpoint.hpp"
#include "neas/errors.hpp"
#include "neas/evalbench.hpp"

namespace neas {

namespace {

constexpr char kDataMagic[8] = {'N', 'E', 'A', 'S', 'D', 'A', 'T', 'A'};

nlohmann::ordered_json params_json(const DataParams& p) {
  nlohmann::ordered_json j;
  j["classes"] = p.classes;
  j["channels"] = p.channels;
  j["image_size"] = p.image_size;
  j["train_per_class"] = p.train_per_class;
  j["val_per_class"] = p.val_per_class;
  j["quality_size"] = p.quality_size;
  j["probe_size"] = p.probe_size;
  j["noise"] = p.noise;
  j["seed"] = p.seed;
  return j;
}

struct Prototype {
  double freq, angle, phase, bx, by, sign;
};

Prototype class_prototype(std::uint64_t seed, int c) {
  Rng rng(derive_seed(seed, "prototype", static_cast<std::uint64_t>(c)));
  Prototype p;
  p.freq = rng.uniform(1.0, 3.0);
  p.angle = M_PI * (c + rng.uniform(0.0, 0.5)) / 4.0;
  p.phase = rng.uniform(0.0, 2.0 * M_PI);
  p.bx = rng.uniform(0.25, 0.75);
  p.by = rng.uniform(0.25, 0.75);
  p.sign = c % 2 ? -1.0 : 1.0;
  return p;
}

double prototype_pixel(const Prototype& p, int ch, int y, int x, int size) {
  const double u = (x + 0.5) / size;
  const double v = (y + 0.5) / size;
  const double t = u * std::cos(p.angle) + v * std::sin(p.angle);
  const double grating = 0.5 * std::sin(2.0 * M_PI * p.freq * t + p.phase + ch);
  const double d2 = (u - p.bx) * (u - p.bx) + (v - p.by) * (v - p.by);
  return grating + 0.5 * p.sign * std::exp(-d2 / 0.02);
}

Samples<double> make_split(const DataParams& p, const std::vector<Prototype>& protos,
                           const char* name, int count) {
  Samples<double> s;
  s.images = Tensor<double>(count, p.channels, p.image_size, p.image_size);
  for (int i = 0; i < count; ++i) {
    const int c = i % p.classes;
    s.labels.push_back(c);
    Rng rng(derive_seed(p.seed, name, static_cast<std::uint64_t>(i)));
    for (int ch = 0; ch < p.channels; ++ch) {
      for (int y = 0; y < p.image_size; ++y) {
        for (int x = 0; x < p.image_size; ++x) {
          const double noise = p.noise > 0 ? p.noise * rng.normal() : 0.0;
          s.images(i, ch, y, x) =
              prototype_pixel(protos[static_cast<std::size_t>(c)], ch, y, x,
                              p.image_size) + noise;
        }
      }
    }
  }
  return s;
}

void write_samples(std::ostream& os, const Samples<double>& s) {
  le::write_u32(os, static_cast<std::uint32_t>(s.images.n()));
  le::write_u32(os, static_cast<std::uint32_t>(s.images.c()));
  le::write_u32(os, static_cast<std::uint32_t>(s.images.h()));
  le::write_u32(os, static_cast<std::uint32_t>(s.images.w()));
  for (double v : s.images.values()) le::write_f64(os, v);
  for (int l : s.labels) le::write_i32(os, l);
}

Samples<double> read_samples(std::istream& is) {
  const int n = static_cast<int>(le::read_u32(is));
  const int c = static_cast<int>(le::read_u32(is));
  const int h = static_cast<int>(le::read_u32(is));
  const int w = static_cast<int>(le::read_u32(is));
  Samples<double> s;
  s.images = Tensor<double>(n, c, h, w);
  for (double& v : s.images.values()) v = le::read_f64(is);
  for (int i = 0; i < n; ++i) s.labels.push_back(le::read_i32(is));
  return s;
}

std::uint32_t read_be32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw InputError("truncated IDX file");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) |
         (std::uint32_t{b[2]} << 8) | b[3];
}

}  // namespace

void DataParams::validate() const {
  if (classes < 2) throw ConfigError("data.classes must be >= 2");
  if (channels < 1) throw ConfigError("data.channels must be >= 1");
  if (image_size < 4) throw ConfigError("data.image_size must be >= 4");
  if (train_per_class < 1 || val_per_class < 1) {
    throw ConfigError("data.train_per_class and data.val_per_class must be >= 1");
  }
  if (quality_size < classes || quality_size % classes != 0) {
    throw ConfigError("data.quality_size must be a positive multiple of data.classes");
  }
  if (probe_size < classes || probe_size % classes != 0) {
    throw ConfigError("data.probe_size must be a positive multiple of data.classes");
  }
  if (!(noise >= 0)) throw ConfigError("data.noise must be >= 0");
  if (external_images.empty() != external_labels.empty()) {
    throw ConfigError("data.external_images and data.external_labels go together");
  }
}

const Samples<double>& ToyDataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "quality") return quality;
  if (name == "probe") return probe;
  throw InputError("unknown split '" + name + "'");
}

std::uint64_t samples_digest(const Samples<double>& s, std::uint64_t h) {
  for (double v : s.images.values()) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    h = splitmix64(h ^ bits);
  }
  for (int l : s.labels) h = splitmix64(h ^ static_cast<std::uint64_t>(l));
  return h;
}

std::uint64_t ToyDataset::digest() const {
  std::uint64_t h = fnv1a("toy-dataset");
  for (const auto* s : {&train, &val, &quality, &probe}) h = samples_digest(*s, h);
  return h;
}

ToyDataset generate_dataset(const DataParams& params) {
  params.validate();
  if (!params.external_images.empty()) return load_idx_dataset(params);
  std::vector<Prototype> protos;
  for (int c = 0; c < params.classes; ++c) protos.push_back(class_prototype(params.seed, c));
  ToyDataset d;
  d.params = params;
  d.train = make_split(params, protos, "train", params.classes * params.train_per_class);
  d.val = make_split(params, protos, "val", params.classes * params.val_per_class);
  d.quality = make_split(params, protos, "quality", params.quality_size);
  d.probe = make_split(params, protos, "probe", params.probe_size);
  return d;
}

void save_dataset(const ToyDataset& data, const std::string& path) {
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write dataset " + path);
    os.write(kDataMagic, sizeof(kDataMagic));
    for (const auto* s : {&data.train, &data.val, &data.quality, &data.probe}) {
      write_samples(os, *s);
    }
    if (!os) throw Error("dataset write failed: " + path);
  }
  nlohmann::ordered_json m;
  m["params"] = params_json(data.params);
  m["digest"] = data.digest();
  std::ofstream js(path + ".json", std::ios::trunc);
  js << m.dump(2) << '\n';
}

ToyDataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open dataset " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string(magic, 8) != std::string(kDataMagic, 8)) {
    throw InputError(path + " is not a dataset file");
  }
  ToyDataset d;
  d.train = read_samples(is);
  d.val = read_samples(is);
  d.quality = read_samples(is);
  d.probe = read_samples(is);
  std::ifstream js(path + ".json");
  if (js) {
    const auto m = nlohmann::json::parse(js, nullptr, false);
    if (m.is_discarded() || !m.contains("digest")) {
      throw InputError("malformed dataset manifest " + path + ".json");
    }
    if (m["digest"].get<std::uint64_t>() != d.digest()) {
      throw InputError("dataset " + path + " does not match its manifest digest");
    }
    const auto& p = m["params"];
    d.params.classes = p.value("classes", 0);
    d.params.channels = p.value("channels", 1);
    d.params.image_size = p.value("image_size", 0);
    d.params.train_per_class = p.value("train_per_class", 0);
    d.params.val_per_class = p.value("val_per_class", 0);
    d.params.quality_size = p.value("quality_size", 0);
    d.params.probe_size = p.value("probe_size", 0);
    d.params.noise = p.value("noise", 0.0);
    d.params.seed = p.value("seed", std::uint64_t{0});
  }
  return d;
}

ToyDataset load_idx_dataset(const DataParams& params) {
  std::ifstream img(params.external_images, std::ios::binary);
  std::ifstream lab(params.external_labels, std::ios::binary);
  if (!img) throw InputError("cannot open " + params.external_images);
  if (!lab) throw InputError("cannot open " + params.external_labels);
  if (read_be32(img) != 0x00000803) throw InputError("bad IDX image magic");
  if (read_be32(lab) != 0x00000801) throw InputError("bad IDX label magic");
  const auto count = read_be32(img);
  const auto rows = read_be32(img);
  const auto cols = read_be32(img);
  if (read_be32(lab) != count) throw InputError("IDX image/label counts differ");
  if (rows != cols || static_cast<int>(rows) != params.image_size) {
    throw ConfigError("data.image_size does not match the IDX images (" +
                      std::to_string(rows) + "x" + std::to_string(cols) + ")");
  }
  if (params.channels != 1) throw ConfigError("IDX images have one channel");
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(params.classes));
  std::vector<unsigned char> pixels(static_cast<std::size_t>(count) * rows * cols);
  img.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  std::vector<unsigned char> labels(count);
  lab.read(reinterpret_cast<char*>(labels.data()), count);
  if (!img || !lab) throw InputError("truncated IDX data");
  for (std::size_t i = 0; i < count; ++i) {
    if (labels[i] < params.classes) by_class[labels[i]].push_back(i);
  }
  const int q = params.quality_size / params.classes;
  const int pr = params.probe_size / params.classes;
  const int need = params.train_per_class + params.val_per_class + q + pr;
  for (int c = 0; c < params.classes; ++c) {
    if (static_cast<int>(by_class[static_cast<std::size_t>(c)].size()) < need) {
      throw ConfigError("IDX data has too few examples of class " + std::to_string(c));
    }
  }
  const int plane = static_cast<int>(rows * cols);
  auto carve = [&](int offset, int per_class) {
    Samples<double> s;
    s.images = Tensor<double>(per_class * params.classes, 1, params.image_size,
                              params.image_size);
    for (int i = 0; i < per_class * params.classes; ++i) {
      const int c = i % params.classes;
      const std::size_t src = by_class[static_cast<std::size_t>(c)]
                                      [static_cast<std::size_t>(offset + i / params.classes)];
      for (int k = 0; k < plane; ++k) {
        s.images.data()[static_cast<std::size_t>(i) * plane + k] =
            pixels[src * plane + k] / 255.0;
      }
      s.labels.push_back(c);
    }
    return s;
  };
  ToyDataset d;
  d.params = params;
  d.train = carve(0, params.train_per_class);
  d.val = carve(params.train_per_class, params.val_per_class);
  d.quality = carve(params.train_per_class + params.val_per_class, q);
  d.probe = carve(params.train_per_class + params.val_per_class + q, pr);
  return d;
}

}  // namespace neas
