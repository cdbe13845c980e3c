#include "aevb/dataio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <tuple>

#include "aevb/errors.hpp"
#include "aevb/samplers.hpp"

namespace aevb {

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t off) {
  if (b.size() < off + 4) throw ParseError("truncated IDX header", b.size());
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

void check_payload(std::size_t have, std::size_t header, unsigned __int128 expected) {
  if (have - header != expected) {
    if (expected > have)
      throw ParseError("IDX payload truncated: header declares more bytes than the file holds (" +
                           std::to_string(have - header) + " present)",
                       have);
    throw ParseError("IDX payload length mismatch: expected " + std::to_string(static_cast<std::size_t>(expected)) +
                         " bytes, found " + std::to_string(have - header),
                     std::min<std::size_t>(have, header + static_cast<std::size_t>(expected)));
  }
}

// Little-endian writer / reader for checkpoints.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void f64s(std::span<const double> v) {
    u64(v.size());
    for (double d : v) f64(d);
  }
  void raw(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : b_(b) {}
  std::size_t offset() const noexcept { return pos_; }
  bool done() const noexcept { return pos_ == b_.size(); }

  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{b_[pos_++]} << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{b_[pos_++]} << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  Vector f64s() {
    const std::uint64_t n = u64();
    if (n > (b_.size() - pos_) / 8) throw ParseError("checkpoint truncated in array of " + std::to_string(n), pos_);
    Vector v(n);
    for (double& d : v) d = f64();
    return v;
  }
  void f64s_into(std::span<double> dst) {
    const std::size_t at = pos_;
    const std::uint64_t n = u64();
    if (n != dst.size())
      throw ParseError("parameter block holds " + std::to_string(n) + " values, topology needs " +
                           std::to_string(dst.size()),
                       at);
    for (double& d : dst) d = f64();
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(b_.begin() + pos_, b_.begin() + pos_ + n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw ParseError("checkpoint truncated", b_.size());
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

std::size_t parse_count(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty() || s[0] == '-') throw ContractError("bad " + what + ": '" + s + "'");
  return static_cast<std::size_t>(v);
}

Matrix rows_range(const Matrix& m, std::size_t from, std::size_t to) {
  Matrix out(to - from, m.cols());
  for (std::size_t r = from; r < to; ++r) std::copy(m.row(r).begin(), m.row(r).end(), out.row(r - from).begin());
  return out;
}

}  // namespace

Matrix Dataset::train() const { return rows_range(x, 0, train_end); }
Matrix Dataset::test() const { return rows_range(x, train_end, x.rows()); }

void split_tail(Dataset& ds, std::size_t test_count) {
  if (test_count >= ds.size())
    throw ContractError("test split of " + std::to_string(test_count) + " leaves no training rows out of " +
                        std::to_string(ds.size()));
  ds.train_end = ds.size() - test_count;
}

void binarize(Dataset& ds, double threshold) {
  for (double& v : ds.x.flat()) v = v > threshold ? 1.0 : 0.0;
}

IdxImages parse_idx_images(std::span<const std::uint8_t> bytes) {
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic != kIdxImagesMagic) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", magic);
    throw ParseError(std::string("bad IDX image magic ") + buf + ", expected 0x00000803", 0);
  }
  IdxImages img;
  img.count = read_be32(bytes, 4);
  img.rows = read_be32(bytes, 8);
  img.cols = read_be32(bytes, 12);
  check_payload(bytes.size(), 16, static_cast<unsigned __int128>(img.count) * img.rows * img.cols);
  img.pixels.assign(bytes.begin() + 16, bytes.end());
  return img;
}

std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> bytes) {
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic != kIdxLabelsMagic) throw ParseError("bad IDX label magic, expected 0x00000801", 0);
  const std::size_t n = read_be32(bytes, 4);
  check_payload(bytes.size(), 8, n);
  return {bytes.begin() + 8, bytes.end()};
}

std::vector<std::uint8_t> encode_idx_images(const IdxImages& images) {
  if (images.pixels.size() != images.count * images.rows * images.cols)
    throw ContractError("IDX pixel count does not match dims");
  std::vector<std::uint8_t> out;
  out.reserve(16 + images.pixels.size());
  put_be32(out, kIdxImagesMagic);
  put_be32(out, static_cast<std::uint32_t>(images.count));
  put_be32(out, static_cast<std::uint32_t>(images.rows));
  put_be32(out, static_cast<std::uint32_t>(images.cols));
  out.insert(out.end(), images.pixels.begin(), images.pixels.end());
  return out;
}

std::vector<std::uint8_t> encode_idx_labels(std::span<const std::uint8_t> labels) {
  std::vector<std::uint8_t> out;
  put_be32(out, kIdxLabelsMagic);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

Dataset load_idx(const std::string& image_path, const std::optional<std::string>& label_path) {
  const IdxImages img = parse_idx_images(read_file(image_path));
  Dataset ds;
  ds.name = std::filesystem::path(image_path).filename().string();
  ds.image_h = img.rows;
  ds.image_w = img.cols;
  ds.x = Matrix(img.count, img.rows * img.cols);
  auto flat = ds.x.flat();
  for (std::size_t i = 0; i < img.pixels.size(); ++i) flat[i] = img.pixels[i] / 255.0;
  ds.train_end = img.count;
  if (label_path) {
    ds.labels = parse_idx_labels(read_file(*label_path));
    if (ds.labels.size() != img.count)
      throw ContractError("label file has " + std::to_string(ds.labels.size()) + " entries for " +
                          std::to_string(img.count) + " images");
  }
  return ds;
}

std::pair<std::size_t, std::size_t> infer_image_shape(std::size_t d) {
  if (d == 560) return {28, 20};
  const auto s = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(d))));
  if (s * s == d) return {s, s};
  return {1, d};
}

Dataset parse_csv_dataset(const std::string& text, const std::string& name) {
  std::vector<double> values;
  std::size_t cols = 0, rows = 0, line_start = 0;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const std::size_t this_line = line_start;
    line_start += line.size() + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::size_t n = 0, pos = 0;
    while (pos <= line.size()) {
      std::size_t end = line.find(',', pos);
      if (end == std::string::npos) end = line.size();
      const std::string field = line.substr(pos, end - pos);
      double v = 0.0;
      std::size_t used = 0;
      try {
        v = std::stod(field, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      while (used < field.size() && (field[used] == ' ' || field[used] == '\t')) ++used;
      if (used == 0 || used != field.size() || !(v >= 0.0 && v <= 255.0))
        throw ParseError("bad CSV value '" + field + "' on row " + std::to_string(rows + 1), this_line + pos);
      values.push_back(v / 255.0);
      ++n;
      pos = end + 1;
    }
    if (cols == 0) cols = n;
    if (n != cols)
      throw ParseError("CSV row " + std::to_string(rows + 1) + " has " + std::to_string(n) + " values, expected " +
                           std::to_string(cols),
                       this_line);
    ++rows;
  }
  if (rows == 0) throw ParseError("CSV dataset is empty", 0);
  Dataset ds;
  ds.name = name;
  ds.x = Matrix(rows, cols, std::move(values));
  ds.train_end = rows;
  std::tie(ds.image_h, ds.image_w) = infer_image_shape(cols);
  return ds;
}

Dataset load_csv_dataset(const std::string& path) {
  const auto bytes = read_file(path);
  return parse_csv_dataset(std::string(bytes.begin(), bytes.end()), std::filesystem::path(path).filename().string());
}

Dataset load_dataset(const std::string& path) {
  const auto bytes = read_file(path);
  if (bytes.size() >= 4 && bytes[0] == 0 && bytes[1] == 0 && bytes[2] == 8 && bytes[3] == 3) return load_idx(path);
  return parse_csv_dataset(std::string(bytes.begin(), bytes.end()), std::filesystem::path(path).filename().string());
}

bool is_synthetic_spec(const std::string& spec) { return spec.rfind("synthetic:", 0) == 0; }

Dataset synthetic_dataset(const std::string& spec, std::uint64_t seed) {
  const std::size_t colon = spec.find(':', 10);
  if (!is_synthetic_spec(spec) || colon == std::string::npos)
    throw ContractError("synthetic dataset spec must be synthetic:<linear|binary>:<n>, got '" + spec + "'");
  const std::string kind = spec.substr(10, colon - 10);
  const std::size_t n = parse_count(spec.substr(colon + 1), "synthetic point count");
  if (n == 0) throw ContractError("synthetic dataset needs at least one point");
  // The generating model is the same for every seed; only the draws change.
  Rng model_rng(0x5eed5eedULL);
  Decoder truth;
  Dataset ds;
  if (kind == "linear") {
    LinearGaussian lg = LinearGaussian::zeros(2, 10);
    for (double& v : lg.w.flat()) v = model_rng.standard_normal();
    for (double& v : lg.b) v = 0.5 * model_rng.standard_normal();
    lg.log_noise_var[0] = std::log(0.1);
    truth = lg;
    ds.image_h = 1;
    ds.image_w = 10;
  } else if (kind == "binary") {
    BernoulliMlp bm = BernoulliMlp::zeros(2, 8, 16);
    for (auto b : bm.blocks())
      for (double& v : b) v = 2.0 * model_rng.standard_normal();
    truth = bm;
    ds.image_h = ds.image_w = 4;
  } else {
    throw ContractError("unknown synthetic dataset kind '" + kind + "'");
  }
  Rng rng(seed);
  const Matrix z = rng.normal_matrix(n, 2);
  ds.x = decoder_sample(truth, z, rng);
  ds.name = spec;
  ds.train_end = n;
  return ds;
}

// ---- checkpoints ----

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  const TrainState& st = ckpt.state;
  const VaeShape shape = st.model.shape();
  ByteWriter w;
  w.raw("AEVB");
  w.u32(kCheckpointVersion);
  w.u64(shape.data_dim);
  w.u64(shape.encoder_hidden);
  w.u64(shape.decoder_hidden);
  w.u64(shape.latent_dim);
  w.u8(static_cast<std::uint8_t>(shape.family));
  w.u8(shape.clamp_mean ? 1 : 0);
  w.u64(ckpt.image_h);
  w.u64(ckpt.image_w);
  w.u8(static_cast<std::uint8_t>(ckpt.algorithm));
  for (auto b : st.model.blocks()) w.f64s(b);
  w.f64(st.optimizer.stepsize);
  w.f64(st.optimizer.epsilon);
  w.f64s(st.optimizer.accum);
  for (std::uint64_t s : st.rng.s) w.u64(s);
  w.u8(st.rng.has_spare ? 1 : 0);
  w.f64(st.rng.spare);
  w.u64(st.examples_seen);
  w.u64(st.epochs_completed);
  w.u64(st.metrics.size());
  for (const MetricPoint& m : st.metrics) {
    w.u64(m.examples_seen);
    w.f64(m.train_bound);
    w.u8(m.test_bound ? 1 : 0);
    w.f64(m.test_bound.value_or(0.0));
  }
  w.u8(st.chain ? 1 : 0);
  if (st.chain) {
    w.u64(st.chain->z.rows());
    w.u64(st.chain->z.cols());
    for (double v : st.chain->z.flat()) w.f64(v);
    w.f64(st.chain->stepsize);
    w.u64(st.chain->iterations);
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (bytes.size() < 4 || r.raw(4) != "AEVB") throw ParseError("not an AEVB checkpoint (bad magic)", 0);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw ParseError("checkpoint format version " + std::to_string(version) + ", this build reads version " +
                         std::to_string(kCheckpointVersion),
                     4);
  VaeShape shape;
  shape.data_dim = r.u64();
  shape.encoder_hidden = r.u64();
  shape.decoder_hidden = r.u64();
  shape.latent_dim = r.u64();
  const std::size_t fam_at = r.offset();
  const std::uint8_t fam = r.u8();
  if (fam > 2) throw ParseError("unknown decoder family code " + std::to_string(fam), fam_at);
  shape.family = static_cast<DecoderFamily>(fam);
  shape.clamp_mean = r.u8() != 0;
  Checkpoint ck;
  ck.image_h = r.u64();
  ck.image_w = r.u64();
  const std::size_t algo_at = r.offset();
  const std::uint8_t algo = r.u8();
  if (algo > 2) throw ParseError("unknown algorithm code " + std::to_string(algo), algo_at);
  ck.algorithm = static_cast<Algorithm>(algo);
  // Guard the allocation below against corrupt sizes.
  const std::size_t limit = bytes.size();
  for (std::size_t v : {shape.data_dim, shape.encoder_hidden, shape.decoder_hidden, shape.latent_dim})
    if (v > limit) throw ParseError("implausible layer size " + std::to_string(v), 4);
  try {
    shape.validate();
  } catch (const std::invalid_argument& e) {
    throw ParseError(std::string("bad topology: ") + e.what(), 8);
  }
  TrainState& st = ck.state;
  st.model = VaeModel::zeros(shape);
  for (auto b : st.model.blocks()) r.f64s_into(b);
  st.optimizer.stepsize = r.f64();
  st.optimizer.epsilon = r.f64();
  st.optimizer.accum = r.f64s();
  for (std::uint64_t& s : st.rng.s) s = r.u64();
  st.rng.has_spare = r.u8() != 0;
  st.rng.spare = r.f64();
  st.examples_seen = r.u64();
  st.epochs_completed = r.u64();
  const std::uint64_t nm = r.u64();
  if (nm > limit) throw ParseError("implausible metric count", r.offset() - 8);
  st.metrics.resize(nm);
  for (MetricPoint& m : st.metrics) {
    m.examples_seen = r.u64();
    m.train_bound = r.f64();
    const bool has_test = r.u8() != 0;
    const double t = r.f64();
    if (has_test) m.test_bound = t;
  }
  if (r.u8() != 0) {
    ChainState c;
    const std::size_t rows = r.u64(), cols = r.u64();
    if (cols != 0 && rows > limit / 8 / cols) throw ParseError("implausible chain size", r.offset() - 16);
    c.z = Matrix(rows, cols);
    for (double& v : c.z.flat()) v = r.f64();
    c.stepsize = r.f64();
    c.iterations = r.u64();
    st.chain = std::move(c);
  }
  if (!r.done()) throw ParseError("trailing bytes after checkpoint", r.offset());
  return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string tmp = path + ".tmp";
  write_file(tmp, encode_checkpoint(ckpt));
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

// ---- images ----

std::uint8_t to_pixel(double v) {
  if (std::isnan(v)) throw NumericError("to_pixel", "NaN intensity");
  v = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::nearbyint(255.0 * v));
}

GrayImage tile_images(const Matrix& images, std::size_t h, std::size_t w, std::size_t columns) {
  if (images.cols() != h * w)
    throw ContractError("images have " + std::to_string(images.cols()) + " values, expected " + std::to_string(h) +
                        "x" + std::to_string(w));
  if (columns == 0) throw ContractError("tile grid needs at least one column");
  const std::size_t n = images.rows();
  const std::size_t grid_rows = (n + columns - 1) / columns;
  GrayImage img;
  img.height = grid_rows * h;
  img.width = columns * w;
  img.pixels.assign(img.height * img.width, 0);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t top = (k / columns) * h, left = (k % columns) * w;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        img.pixels[(top + i) * img.width + left + j] = to_pixel(images(k, i * w + j));
  }
  return img;
}

std::vector<std::uint8_t> encode_pgm(const GrayImage& img) {
  const std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

void write_pgm(const std::string& path, const GrayImage& img) { write_file(path, encode_pgm(img)); }

Matrix manifold_latents(std::size_t k) {
  if (k == 0) throw ContractError("manifold grid side must be positive");
  Vector q(k);
  // Mirrored so the grid is exactly symmetric about the origin.
  for (std::size_t i = 0; i < k / 2; ++i) {
    q[i] = normal_quantile((static_cast<double>(i) + 0.5) / static_cast<double>(k));
    q[k - 1 - i] = -q[i];
  }
  if (k % 2 == 1) q[k / 2] = 0.0;
  Matrix z(k * k, 2);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      z(i * k + j, 0) = q[j];
      z(i * k + j, 1) = q[i];
    }
  return z;
}

GrayImage manifold_grid(const VaeModel& model, std::size_t k, std::size_t h, std::size_t w) {
  if (model.latent_dim() != 2)
    throw ContractError("manifold grid needs a 2-dimensional latent space, model has " +
                        std::to_string(model.latent_dim()));
  return tile_images(decoder_mean(model.decoder, manifold_latents(k)), h, w, k);
}

GrayImage sample_grid(const VaeModel& model, std::size_t n, std::size_t h, std::size_t w, Rng& rng) {
  if (n == 0) throw ContractError("sample grid needs at least one sample");
  std::size_t cols = static_cast<std::size_t>(std::sqrt(static_cast<double>(n)));
  while (cols * cols < n) ++cols;
  while (cols > 1 && (cols - 1) * (cols - 1) >= n) --cols;
  const Matrix z = rng.normal_matrix(n, model.latent_dim());
  return tile_images(decoder_mean(model.decoder, z), h, w, cols);
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw std::runtime_error("error reading '" + path + "'");
  return bytes;
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("error writing '" + path + "'");
}

}  // namespace aevb
