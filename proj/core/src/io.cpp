#include "dm3d/io.hpp"

#include <bit>
#include <cctype>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace dm3d {

namespace {

[[noreturn]] void parse_fail(const std::string& path, std::int64_t line,
                             const std::string& what) {
  throw std::runtime_error(path + ":" + std::to_string(line) + ": " + what);
}

bool blank_or_comment(const std::string& line) {
  for (char ch : line) {
    if (ch == '#') return true;
    if (!std::isspace(static_cast<unsigned char>(ch))) return false;
  }
  return true;
}

PointCloud load_xyz(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<double> coords;
  std::string line;
  std::int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (blank_or_comment(line)) continue;
    std::istringstream ss(line);
    double x, y, z;
    if (!(ss >> x >> y >> z))
      parse_fail(path, lineno, "expected three numeric fields");
    std::string extra;
    if (ss >> extra) parse_fail(path, lineno, "trailing field '" + extra + "'");
    coords.insert(coords.end(), {x, y, z});
  }
  if (coords.empty()) throw std::runtime_error(path + ": empty point cloud");
  const auto n = static_cast<std::int64_t>(coords.size() / 3);
  PointCloud cloud;
  cloud.coords = Tensor(n, 3, std::move(coords));
  cloud.validate();
  return cloud;
}

PointCloud load_ply(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  std::int64_t lineno = 0;

  auto next_line = [&]() {
    if (!std::getline(in, line)) parse_fail(path, lineno, "unexpected end of file");
    ++lineno;
  };

  next_line();
  if (line != "ply") parse_fail(path, lineno, "missing 'ply' magic");

  std::int64_t vertex_count = -1;
  std::vector<std::string> vertex_props;
  bool in_vertex_element = false;
  bool ascii = false;
  while (true) {
    next_line();
    std::istringstream ss(line);
    std::string tok;
    ss >> tok;
    if (tok == "comment" || tok.empty()) continue;
    if (tok == "format") {
      std::string kind;
      ss >> kind;
      ascii = kind == "ascii";
      if (!ascii) parse_fail(path, lineno, "only ascii PLY is supported");
    } else if (tok == "element") {
      std::string name;
      std::int64_t count = 0;
      if (!(ss >> name >> count)) parse_fail(path, lineno, "malformed element");
      in_vertex_element = name == "vertex";
      if (in_vertex_element) vertex_count = count;
    } else if (tok == "property") {
      if (!in_vertex_element) continue;
      std::string type, name;
      if (!(ss >> type)) parse_fail(path, lineno, "malformed property");
      if (type == "list") parse_fail(path, lineno, "list property on vertices");
      if (!(ss >> name)) parse_fail(path, lineno, "malformed property");
      vertex_props.push_back(name);
    } else if (tok == "end_header") {
      break;
    } else {
      parse_fail(path, lineno, "unknown header token '" + tok + "'");
    }
  }
  if (vertex_count < 0) parse_fail(path, lineno, "no vertex element");
  if (vertex_count == 0) throw std::runtime_error(path + ": empty point cloud");

  std::int64_t ix = -1, iy = -1, iz = -1;
  for (std::size_t i = 0; i < vertex_props.size(); ++i) {
    if (vertex_props[i] == "x") ix = static_cast<std::int64_t>(i);
    if (vertex_props[i] == "y") iy = static_cast<std::int64_t>(i);
    if (vertex_props[i] == "z") iz = static_cast<std::int64_t>(i);
  }
  if (ix < 0 || iy < 0 || iz < 0)
    parse_fail(path, lineno, "vertex element lacks x/y/z properties");

  Tensor coords(vertex_count, 3);
  std::vector<double> fields(vertex_props.size());
  for (std::int64_t v = 0; v < vertex_count; ++v) {
    next_line();
    std::istringstream ss(line);
    for (std::size_t f = 0; f < fields.size(); ++f)
      if (!(ss >> fields[f]))
        parse_fail(path, lineno, "expected " + std::to_string(fields.size()) +
                                     " vertex fields");
    coords(v, 0) = fields[static_cast<std::size_t>(ix)];
    coords(v, 1) = fields[static_cast<std::size_t>(iy)];
    coords(v, 2) = fields[static_cast<std::size_t>(iz)];
  }
  PointCloud cloud;
  cloud.coords = std::move(coords);
  cloud.validate();
  return cloud;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// -- little-endian primitives for the parameter container --

constexpr char kMagic[8] = {'D', 'M', '3', 'D', 'P', 'R', 'M', '1'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

void put_f64(std::ostream& out, double v) {
  put_u64(out, std::bit_cast<std::uint64_t>(v));
}

void need(std::istream& in, char* buf, std::streamsize n, const std::string& path) {
  in.read(buf, n);
  if (in.gcount() != n)
    throw std::runtime_error(path + ": truncated parameter file");
}

std::uint32_t get_u32(std::istream& in, const std::string& path) {
  char b[4];
  need(in, b, 4, path);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[i])) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream& in, const std::string& path) {
  char b[8];
  need(in, b, 8, path);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
  return v;
}

double get_f64(std::istream& in, const std::string& path) {
  return std::bit_cast<double>(get_u64(in, path));
}

}  // namespace

PointCloud load_pointcloud(const std::string& path, CloudFormat format) {
  if (format == CloudFormat::kAuto)
    format = ends_with(path, ".ply") ? CloudFormat::kPlyAscii : CloudFormat::kXyz;
  return format == CloudFormat::kPlyAscii ? load_ply(path) : load_xyz(path);
}

void save_arrays(const std::string& path,
                 const std::vector<std::pair<std::string, Tensor>>& arrays) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(kMagic, sizeof(kMagic));
  put_u32(out, kVersion);
  put_u64(out, arrays.size());
  for (const auto& [name, tensor] : arrays) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u64(out, static_cast<std::uint64_t>(tensor.rows()));
    put_u64(out, static_cast<std::uint64_t>(tensor.cols()));
    for (std::int64_t i = 0; i < tensor.size(); ++i) put_f64(out, tensor[i]);
  }
  if (!out) throw std::runtime_error("write failed for " + path);
}

std::vector<std::pair<std::string, Tensor>> load_arrays(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char magic[8];
  need(in, magic, 8, path);
  if (std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error(path + ": not a parameter file (bad magic)");
  const std::uint32_t version = get_u32(in, path);
  if (version != kVersion)
    throw std::runtime_error(path + ": unsupported version " +
                             std::to_string(version));
  const std::uint64_t count = get_u64(in, path);
  std::vector<std::pair<std::string, Tensor>> arrays;
  arrays.reserve(count);
  for (std::uint64_t a = 0; a < count; ++a) {
    const std::uint32_t name_len = get_u32(in, path);
    std::string name(name_len, '\0');
    need(in, name.data(), name_len, path);
    const auto rows = static_cast<std::int64_t>(get_u64(in, path));
    const auto cols = static_cast<std::int64_t>(get_u64(in, path));
    // Division instead of rows * cols: the product of two attacker-supplied
    // 64-bit dimensions can wrap around and sneak past the limit.
    constexpr std::int64_t kMaxElems = std::int64_t{1} << 32;
    if (rows < 0 || cols < 0 || (rows > 0 && cols > kMaxElems / rows))
      throw std::runtime_error(path + ": implausible shape for array " + name);
    Tensor t(rows, cols);
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = get_f64(in, path);
    arrays.emplace_back(std::move(name), std::move(t));
  }
  return arrays;
}

void save_params(const std::string& path, ModelParams& params) {
  std::vector<std::pair<std::string, Tensor>> arrays;
  params.visit([&](const std::string& name, ad::Var& v) {
    arrays.emplace_back(name, v.value());
  });
  save_arrays(path, arrays);
}

void load_params(const std::string& path, ModelParams& params) {
  auto arrays = load_arrays(path);
  std::unordered_map<std::string, Tensor*> stored;
  for (auto& [name, tensor] : arrays) {
    if (!stored.emplace(name, &tensor).second)
      throw std::runtime_error(path + ": duplicate array " + name);
  }
  std::size_t used = 0;
  params.visit([&](const std::string& name, ad::Var& v) {
    auto it = stored.find(name);
    if (it == stored.end())
      throw std::runtime_error(path + ": missing array " + name);
    if (!it->second->same_shape(v.value()))
      throw std::runtime_error(
          path + ": shape mismatch for array " + name + " (stored " +
          std::to_string(it->second->rows()) + "x" +
          std::to_string(it->second->cols()) + ", expected " +
          std::to_string(v.rows()) + "x" + std::to_string(v.cols()) + ")");
    v.set_value(*it->second);
    ++used;
  });
  if (used != stored.size())
    throw std::runtime_error(path + ": file contains arrays unknown to this model");
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  RunConfig cfg;
  std::string line;
  std::int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (blank_or_comment(line)) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      parse_fail(path, lineno, "expected key=value");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      if (key == "n_groups") cfg.model.n_groups = std::stoll(value);
      else if (key == "group_size") cfg.model.group_size = std::stoll(value);
      else if (key == "feat_dim") cfg.model.feat_dim = std::stoll(value);
      else if (key == "n_stages") cfg.model.n_stages = std::stoll(value);
      else if (key == "d_state") cfg.model.d_state = std::stoll(value);
      else if (key == "k_q") cfg.model.k_q = std::stoll(value);
      else if (key == "k_r") cfg.model.k_r = std::stoll(value);
      else if (key == "radius") cfg.model.radius = std::stod(value);
      else if (key == "hilbert_order") cfg.model.hilbert_order = std::stoi(value);
      else if (key == "offset_kernel") cfg.model.offset_kernel = std::stoll(value);
      else if (key == "dp_scale") cfg.model.dp_scale = std::stod(value);
      else if (key == "sigma_s") cfg.model.sigma_s_init = std::stod(value);
      else if (key == "sigma_t") cfg.model.sigma_t_init = std::stod(value);
      else if (key == "seed") cfg.seed = std::stoull(value);
      else if (key == "cloud") cfg.cloud_path = value;
      else if (key == "params") cfg.params_path = value;
      else parse_fail(path, lineno, "unknown key '" + key + "'");
    } catch (const std::invalid_argument&) {
      parse_fail(path, lineno, "malformed value for '" + key + "'");
    } catch (const std::out_of_range&) {
      parse_fail(path, lineno, "value out of range for '" + key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

}  // namespace dm3d
