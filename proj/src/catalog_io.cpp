#include "skycat/catalog_io.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace skycat {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'S', 'K', 'Y', 'I', 'M', 'G', '1', '\0'};
constexpr std::uint32_t kEndianTag = 0x01020304u;
constexpr std::uint32_t kImageVersion = 1;
constexpr std::size_t kHeaderBytes = 8 + 4 + 4 + 8 + 3 * 4 + 5 * 8;

const char* const kCatalogHeader =
    "id,x,y,is_star,flux_u,flux_g,flux_r,flux_i,flux_z,profile,eccentricity,scale,angle";
const char* const kEstimateHeader =
    "id,x,y,p_star,logflux_mean,logflux_sd,color1_mean,color1_sd,color2_mean,color2_sd,color3_mean,color3_sd,"
    "color4_mean,color4_sd,profile,eccentricity,scale,angle";
const char* const kManifestHeader = "id,file,band,width,height,background,psf_sigma,origin_x,origin_y,pixel_scale";

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::string where(const fs::path& path, std::size_t line) { return path.string() + ":" + std::to_string(line); }

double parse_real(const std::string& s, const fs::path& path, std::size_t line) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw FormatError(where(path, line) + ": bad number '" + s + "'");
  }
  return v;
}

std::int64_t parse_int(const std::string& s, const fs::path& path, std::size_t line) {
  std::int64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw FormatError(where(path, line) + ": bad integer '" + s + "'");
  }
  return v;
}

std::ifstream open_in(const fs::path& path, std::ios::openmode mode = std::ios::in) {
  std::ifstream in(path, mode);
  if (!in) throw FormatError(path.string() + ": cannot open for reading");
  return in;
}

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(path, mode | std::ios::trunc);
  if (!out) throw FormatError(path.string() + ": cannot open for writing");
  return out;
}

void finish(std::ofstream& out, const fs::path& path) {
  out.flush();
  if (!out) throw FormatError(path.string() + ": write failed");
}

/// Reads a CSV with the given header; returns rows of `columns` fields.
std::vector<std::pair<std::size_t, std::vector<std::string>>> read_rows(const fs::path& path, const char* header,
                                                                        std::size_t columns) {
  auto in = open_in(path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != header) throw FormatError(path.string() + ": unexpected header '" + line + "'");
  std::vector<std::pair<std::size_t, std::vector<std::string>>> rows;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty() || line == "\r") continue;
    auto f = split(line, ',');
    if (f.size() != columns) {
      throw FormatError(where(path, n) + ": expected " + std::to_string(columns) + " fields, got " +
                        std::to_string(f.size()));
    }
    rows.emplace_back(n, std::move(f));
  }
  return rows;
}

void put_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f64(std::string& b, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  put_u64(b, u);
}
std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}
std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}
double get_f64(const unsigned char* p) {
  const std::uint64_t u = get_u64(p);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

}  // namespace

std::array<double, kSourceFields> source_fields(const SourceModel& s) {
  std::array<double, kSourceFields> v{};
  int k = 0;
  v[k++] = s.position.x;
  v[k++] = s.position.y;
  v[k++] = s.q_star;
  for (int t = 0; t < 2; ++t) {
    v[k++] = s.logflux_mean[t];
    v[k++] = s.logflux_sd[t];
  }
  for (int t = 0; t < 2; ++t)
    for (int c = 0; c < kColorCount; ++c) v[k++] = s.color_mean[t][c];
  for (int t = 0; t < 2; ++t)
    for (int c = 0; c < kColorCount; ++c) v[k++] = s.color_sd[t][c];
  v[k++] = s.shape.profile_mix;
  v[k++] = s.shape.eccentricity;
  v[k++] = s.shape.scale;
  v[k++] = s.shape.angle;
  return v;
}

void set_source_fields(const std::array<double, kSourceFields>& v, SourceModel& s) {
  int k = 0;
  s.position.x = v[k++];
  s.position.y = v[k++];
  s.q_star = v[k++];
  for (int t = 0; t < 2; ++t) {
    s.logflux_mean[t] = v[k++];
    s.logflux_sd[t] = v[k++];
  }
  for (int t = 0; t < 2; ++t)
    for (int c = 0; c < kColorCount; ++c) s.color_mean[t][c] = v[k++];
  for (int t = 0; t < 2; ++t)
    for (int c = 0; c < kColorCount; ++c) s.color_sd[t][c] = v[k++];
  s.shape.profile_mix = v[k++];
  s.shape.eccentricity = v[k++];
  s.shape.scale = v[k++];
  s.shape.angle = v[k++];
}

std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_catalog_csv(const fs::path& path, const std::vector<CatalogEntry>& entries) {
  auto out = open_out(path);
  out << kCatalogHeader << '\n';
  for (const auto& e : entries) {
    out << e.id << ',' << format_real(e.position.x) << ',' << format_real(e.position.y) << ',' << (e.is_star ? 1 : 0);
    for (double f : e.flux) out << ',' << format_real(f);
    out << ',' << format_real(e.shape.profile_mix) << ',' << format_real(e.shape.eccentricity) << ','
        << format_real(e.shape.scale) << ',' << format_real(e.shape.angle) << '\n';
  }
  finish(out, path);
}

std::vector<CatalogEntry> read_catalog_csv(const fs::path& path) {
  std::vector<CatalogEntry> out;
  for (const auto& [n, f] : read_rows(path, kCatalogHeader, 13)) {
    CatalogEntry e;
    e.id = parse_int(f[0], path, n);
    e.position = {parse_real(f[1], path, n), parse_real(f[2], path, n)};
    const auto star = parse_int(f[3], path, n);
    if (star != 0 && star != 1) throw FormatError(where(path, n) + ": is_star must be 0 or 1");
    e.is_star = star == 1;
    for (int b = 0; b < kBandCount; ++b) {
      e.flux[b] = parse_real(f[4 + b], path, n);
      if (!(e.flux[b] > 0.0) || !std::isfinite(e.flux[b])) {
        throw FormatError(where(path, n) + ": fluxes must be positive and finite");
      }
    }
    e.shape = {parse_real(f[9], path, n), parse_real(f[10], path, n), parse_real(f[11], path, n),
               parse_real(f[12], path, n)};
    try {
      e.shape.validate();
    } catch (const ValidationError& err) {
      throw FormatError(where(path, n) + ": " + err.what());
    }
    out.push_back(e);
  }
  return out;
}

EstimateEntry summarize(const SourceModel& s) {
  EstimateEntry e;
  const int t = s.q_star >= 0.5 ? kStar : kGalaxy;
  e.id = s.id;
  e.position = s.position;
  e.p_star = s.q_star;
  e.logflux_mean = s.logflux_mean[t];
  e.logflux_sd = s.logflux_sd[t];
  e.color_mean = s.color_mean[t];
  e.color_sd = s.color_sd[t];
  e.shape = s.shape;
  return e;
}

std::string format_estimate_csv(const std::vector<EstimateEntry>& entries) {
  std::string out = kEstimateHeader;
  out += '\n';
  for (const auto& e : entries) {
    out += std::to_string(e.id);
    for (double v : {e.position.x, e.position.y, e.p_star, e.logflux_mean, e.logflux_sd}) out += ',' + format_real(v);
    for (int k = 0; k < kColorCount; ++k) out += ',' + format_real(e.color_mean[k]) + ',' + format_real(e.color_sd[k]);
    for (double v : {e.shape.profile_mix, e.shape.eccentricity, e.shape.scale, e.shape.angle}) out += ',' + format_real(v);
    out += '\n';
  }
  return out;
}

void write_estimate_csv(const fs::path& path, const std::vector<EstimateEntry>& entries) {
  auto out = open_out(path, std::ios::out | std::ios::binary);
  out << format_estimate_csv(entries);
  finish(out, path);
}

std::vector<EstimateEntry> read_estimate_csv(const fs::path& path) {
  std::vector<EstimateEntry> out;
  for (const auto& [n, f] : read_rows(path, kEstimateHeader, 18)) {
    EstimateEntry e;
    e.id = parse_int(f[0], path, n);
    e.position = {parse_real(f[1], path, n), parse_real(f[2], path, n)};
    e.p_star = parse_real(f[3], path, n);
    e.logflux_mean = parse_real(f[4], path, n);
    e.logflux_sd = parse_real(f[5], path, n);
    for (int k = 0; k < kColorCount; ++k) {
      e.color_mean[k] = parse_real(f[6 + 2 * k], path, n);
      e.color_sd[k] = parse_real(f[7 + 2 * k], path, n);
    }
    e.shape = {parse_real(f[14], path, n), parse_real(f[15], path, n), parse_real(f[16], path, n),
               parse_real(f[17], path, n)};
    out.push_back(e);
  }
  return out;
}

void write_image(const fs::path& path, const ImagePatch& patch, std::int64_t id) {
  patch.validate();
  std::string b(kMagic, 8);
  b.reserve(kHeaderBytes + 4 * patch.pixels.size());
  put_u32(b, kEndianTag);
  put_u32(b, kImageVersion);
  put_u64(b, static_cast<std::uint64_t>(id));
  put_u32(b, static_cast<std::uint32_t>(patch.width));
  put_u32(b, static_cast<std::uint32_t>(patch.height));
  put_u32(b, static_cast<std::uint32_t>(patch.meta.band));
  for (double v : {patch.meta.background, patch.meta.psf_sigma, patch.meta.origin.x, patch.meta.origin.y,
                   patch.meta.pixel_scale}) {
    put_f64(b, v);
  }
  for (std::int32_t x : patch.pixels) put_u32(b, static_cast<std::uint32_t>(x));
  auto out = open_out(path, std::ios::out | std::ios::binary);
  out.write(b.data(), static_cast<std::streamsize>(b.size()));
  finish(out, path);
}

ImagePatch read_image(const fs::path& path, std::int64_t* id) {
  auto in = open_in(path, std::ios::in | std::ios::binary);
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto bad = [&](const std::string& what) { return FormatError(path.string() + ": " + what); };
  if (data.size() < kHeaderBytes) throw bad("truncated header");
  const auto* p = reinterpret_cast<const unsigned char*>(data.data());
  if (std::memcmp(p, kMagic, 8) != 0) throw bad("bad magic");
  if (get_u32(p + 8) != kEndianTag) throw bad("bad endianness tag");
  if (get_u32(p + 12) != kImageVersion) throw bad("unsupported version " + std::to_string(get_u32(p + 12)));
  if (id) *id = static_cast<std::int64_t>(get_u64(p + 16));
  ImagePatch patch;
  patch.width = static_cast<std::int32_t>(get_u32(p + 24));
  patch.height = static_cast<std::int32_t>(get_u32(p + 28));
  patch.meta.band = static_cast<std::int32_t>(get_u32(p + 32));
  patch.meta.background = get_f64(p + 36);
  patch.meta.psf_sigma = get_f64(p + 44);
  patch.meta.origin = {get_f64(p + 52), get_f64(p + 60)};
  patch.meta.pixel_scale = get_f64(p + 68);
  if (patch.width < 1 || patch.height < 1) throw bad("bad dimensions");
  const std::size_t count = static_cast<std::size_t>(patch.width) * static_cast<std::size_t>(patch.height);
  if (data.size() != kHeaderBytes + 4 * count) throw bad("body size does not match the header");
  patch.pixels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    patch.pixels[i] = static_cast<std::int32_t>(get_u32(p + kHeaderBytes + 4 * i));
  }
  try {
    patch.validate();
  } catch (const ValidationError& e) {
    throw bad(e.what());
  }
  return patch;
}

void write_manifest(const fs::path& path, const std::vector<ImageRecord>& images) {
  auto out = open_out(path);
  out << kManifestHeader << '\n';
  for (const auto& r : images) {
    const auto& g = r.geometry;
    if (r.file.string().find(',') != std::string::npos) throw FormatError("manifest: file names may not contain ','");
    out << g.id << ',' << r.file.string() << ',' << g.meta.band << ',' << g.width << ',' << g.height << ','
        << format_real(g.meta.background) << ',' << format_real(g.meta.psf_sigma) << ','
        << format_real(g.meta.origin.x) << ',' << format_real(g.meta.origin.y) << ','
        << format_real(g.meta.pixel_scale) << '\n';
  }
  finish(out, path);
}

std::vector<ImageRecord> read_manifest(const fs::path& path) {
  std::vector<ImageRecord> out;
  const fs::path dir = path.parent_path();
  for (const auto& [n, f] : read_rows(path, kManifestHeader, 10)) {
    ImageRecord r;
    r.geometry.id = parse_int(f[0], path, n);
    r.file = fs::path(f[1]).is_absolute() ? fs::path(f[1]) : dir / f[1];
    r.geometry.meta.band = static_cast<int>(parse_int(f[2], path, n));
    r.geometry.width = static_cast<int>(parse_int(f[3], path, n));
    r.geometry.height = static_cast<int>(parse_int(f[4], path, n));
    r.geometry.meta.background = parse_real(f[5], path, n);
    r.geometry.meta.psf_sigma = parse_real(f[6], path, n);
    r.geometry.meta.origin = {parse_real(f[7], path, n), parse_real(f[8], path, n)};
    r.geometry.meta.pixel_scale = parse_real(f[9], path, n);
    try {
      r.geometry.meta.validate();
    } catch (const ValidationError& e) {
      throw FormatError(where(path, n) + ": " + e.what());
    }
    if (r.geometry.width < 1 || r.geometry.height < 1) throw FormatError(where(path, n) + ": bad image size");
    out.push_back(r);
  }
  return out;
}

void write_tasks(const fs::path& path, const std::vector<Task>& tasks) {
  auto out = open_out(path);
  out << "# skycat task file\n";
  for (const auto& t : tasks) {
    out << "TASK " << t.id << ' ' << t.stage << ' ' << format_real(t.region.min_corner.x) << ' '
        << format_real(t.region.min_corner.y) << ' ' << format_real(t.region.max_corner.x) << ' '
        << format_real(t.region.max_corner.y) << ' ' << format_real(t.estimated_work) << '\n';
    out << "IMAGES " << t.image_ids.size();
    for (auto id : t.image_ids) out << ' ' << id;
    out << '\n';
    for (const auto& s : t.sources) {
      out << "SOURCE " << s.id << ' ' << format_real(s.anchor.center.x) << ' ' << format_real(s.anchor.center.y)
          << ' ' << format_real(s.anchor.scale);
      for (double v : source_fields(s)) out << ' ' << format_real(v);
      out << '\n';
    }
    out << "END\n";
  }
  finish(out, path);
}

std::vector<Task> read_tasks(const fs::path& path) {
  auto in = open_in(path);
  std::vector<Task> tasks;
  std::string line;
  std::size_t n = 0;
  Task* cur = nullptr;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> f;
    {
      std::istringstream ss(line);
      std::string tok;
      while (ss >> tok) f.push_back(tok);
    }
    const std::string& kind = f[0];
    const auto need = [&](std::size_t k) {
      if (f.size() != k) {
        throw FormatError(where(path, n) + ": " + kind + " record needs " + std::to_string(k - 1) + " fields");
      }
    };
    if (kind == "TASK") {
      if (cur) throw FormatError(where(path, n) + ": TASK before END");
      need(8);
      tasks.emplace_back();
      cur = &tasks.back();
      cur->id = parse_int(f[1], path, n);
      cur->stage = static_cast<int>(parse_int(f[2], path, n));
      if (cur->stage != 1 && cur->stage != 2) throw FormatError(where(path, n) + ": stage must be 1 or 2");
      cur->region = {{parse_real(f[3], path, n), parse_real(f[4], path, n)},
                     {parse_real(f[5], path, n), parse_real(f[6], path, n)}};
      try {
        cur->region.validate();
      } catch (const ValidationError& e) {
        throw FormatError(where(path, n) + ": " + e.what());
      }
      cur->estimated_work = parse_real(f[7], path, n);
    } else if (kind == "IMAGES") {
      if (!cur) throw FormatError(where(path, n) + ": IMAGES outside a task");
      if (f.size() < 2) need(2);
      const auto count = parse_int(f[1], path, n);
      if (count < 0) throw FormatError(where(path, n) + ": negative image count");
      need(2 + static_cast<std::size_t>(count));
      for (std::size_t k = 2; k < f.size(); ++k) cur->image_ids.push_back(parse_int(f[k], path, n));
    } else if (kind == "SOURCE") {
      if (!cur) throw FormatError(where(path, n) + ": SOURCE outside a task");
      need(5 + kSourceFields);
      SourceModel s;
      s.id = parse_int(f[1], path, n);
      s.anchor.center = {parse_real(f[2], path, n), parse_real(f[3], path, n)};
      s.anchor.scale = parse_real(f[4], path, n);
      std::array<double, kSourceFields> v;
      for (int k = 0; k < kSourceFields; ++k) v[k] = parse_real(f[5 + k], path, n);
      set_source_fields(v, s);
      try {
        s.validate();
      } catch (const ValidationError& e) {
        throw FormatError(where(path, n) + ": " + e.what());
      }
      cur->sources.push_back(s);
    } else if (kind == "END") {
      if (!cur) throw FormatError(where(path, n) + ": END outside a task");
      need(1);
      cur = nullptr;
    } else {
      throw FormatError(where(path, n) + ": unknown record '" + kind + "'");
    }
  }
  if (cur) throw FormatError(path.string() + ": missing END for task " + std::to_string(cur->id));
  return tasks;
}

}  // namespace skycat
