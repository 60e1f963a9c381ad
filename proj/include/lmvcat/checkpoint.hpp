#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "lmvcat/error.hpp"
#include "lmvcat/model.hpp"

namespace lmvcat {

// Layout (text header, raw little-endian blobs):
//
//   LMVCAT-CHECKPOINT 1
//   dtype float32|float64
//   config d_e <v>
//   ...                                (one "config <key> <value>" per field)
//   meta <key> <value>                 (free-form echo, optional)
//   view_dims <d_1> ... <d_m>
//   num_labels <c>
//   params <count>
//   param <name> <rank> <dim_1> ... <dim_rank>\n<raw bytes>
//   ...
//   end
inline constexpr const char* kCheckpointMagic = "LMVCAT-CHECKPOINT";
inline constexpr int kCheckpointVersion = 1;

struct CheckpointHeader {
  Precision precision = Precision::Float32;
  ModelConfig config;
  std::vector<std::size_t> view_dims;
  std::size_t num_labels = 0;
  std::map<std::string, std::string> meta;
};

template <class T>
constexpr Precision precision_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? Precision::Float32 : Precision::Float64;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const LmvcatModel<T>& model,
                     const std::map<std::string, std::string>& meta = {}) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::MissingFile, "cannot write checkpoint " + path.string());
  const ModelConfig& cfg = model.config();
  out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  out << "dtype " << to_string(precision_of<T>()) << '\n';
  out << "config d_e " << cfg.d_e << '\n';
  out << "config heads " << cfg.heads << '\n';
  out << "config layers_v " << cfg.layers_v << '\n';
  out << "config layers_c " << cfg.layers_c << '\n';
  {
    std::ostringstream os;
    os.precision(17);
    os << "config dropout " << cfg.dropout << '\n' << "config gamma " << cfg.gamma << '\n';
    out << os.str();
  }
  for (const auto& [k, v] : meta) {
    require(k.find_first_of(" \n") == std::string::npos && v.find('\n') == std::string::npos,
            ErrorKind::InvalidArgument, "checkpoint meta entries must be single-line, keys without spaces");
    out << "meta " << k << ' ' << v << '\n';
  }
  out << "view_dims";
  for (std::size_t d : model.view_dims()) out << ' ' << d;
  out << '\n' << "num_labels " << model.num_labels() << '\n';
  const ParamStore<T>& params = model.params();
  out << "params " << params.size() << '\n';
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor<T>& t = params.value(i);
    out << "param " << params.name(i) << ' ' << t.rank();
    for (std::size_t d : t.shape()) out << ' ' << d;
    out << '\n';
    out.write(reinterpret_cast<const char*>(t.data().data()), std::streamsize(t.size() * sizeof(T)));
  }
  out << "end\n";
  require(out.good(), ErrorKind::MissingFile, "failed writing checkpoint " + path.string());
}

namespace detail {

inline std::string read_line(std::istream& in, const std::string& what) {
  std::string line;
  require(bool(std::getline(in, line)), ErrorKind::ParseError, "checkpoint truncated while reading " + what);
  return line;
}

inline CheckpointHeader read_checkpoint_header(std::istream& in, std::size_t& param_count) {
  CheckpointHeader h;
  {
    std::istringstream ls(read_line(in, "magic"));
    std::string magic;
    int version = 0;
    ls >> magic >> version;
    require(magic == kCheckpointMagic, ErrorKind::ParseError, "not an LMVCAT checkpoint");
    require(version == kCheckpointVersion, ErrorKind::ParseError,
            "unsupported checkpoint version " + std::to_string(version));
  }
  while (true) {
    std::istringstream ls(read_line(in, "header"));
    std::string key;
    ls >> key;
    if (key == "dtype") {
      std::string s;
      ls >> s;
      h.precision = parse_precision(s);
    } else if (key == "config") {
      std::string name;
      ls >> name;
      if (name == "d_e") ls >> h.config.d_e;
      else if (name == "heads") ls >> h.config.heads;
      else if (name == "layers_v") ls >> h.config.layers_v;
      else if (name == "layers_c") ls >> h.config.layers_c;
      else if (name == "dropout") ls >> h.config.dropout;
      else if (name == "gamma") ls >> h.config.gamma;
      else fail(ErrorKind::ParseError, "unknown checkpoint config key " + name);
      require(!ls.fail(), ErrorKind::ParseError, "bad value for checkpoint config " + name);
    } else if (key == "meta") {
      std::string name, value;
      ls >> name;
      std::getline(ls >> std::ws, value);
      h.meta[name] = value;
    } else if (key == "view_dims") {
      std::size_t d;
      while (ls >> d) h.view_dims.push_back(d);
    } else if (key == "num_labels") {
      ls >> h.num_labels;
    } else if (key == "params") {
      ls >> param_count;
      require(!ls.fail(), ErrorKind::ParseError, "bad parameter count");
      break;
    } else {
      fail(ErrorKind::ParseError, "unknown checkpoint header line '" + key + "'");
    }
  }
  h.config.precision = h.precision;
  return h;
}

}  // namespace detail

inline CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::MissingFile, "cannot open checkpoint " + path.string());
  std::size_t count = 0;
  return detail::read_checkpoint_header(in, count);
}

/// Restores a model saved by save_checkpoint with the same precision; every
/// parameter is reproduced bit for bit.
template <class T>
LmvcatModel<T> load_checkpoint(const std::filesystem::path& path, CheckpointHeader* header_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::MissingFile, "cannot open checkpoint " + path.string());
  std::size_t count = 0;
  CheckpointHeader h = detail::read_checkpoint_header(in, count);
  require(h.precision == precision_of<T>(), ErrorKind::ParseError,
          "checkpoint holds " + to_string(h.precision) + " parameters, requested " + to_string(precision_of<T>()));
  LmvcatModel<T> model(h.config, h.view_dims, h.num_labels);
  ParamStore<T>& params = model.params();
  require(count == params.size(), ErrorKind::ParseError,
          "checkpoint has " + std::to_string(count) + " parameters, model layout expects " +
              std::to_string(params.size()));
  for (std::size_t i = 0; i < count; ++i) {
    std::istringstream ls(detail::read_line(in, "parameter"));
    std::string tag, name;
    std::size_t rank = 0;
    ls >> tag >> name >> rank;
    require(tag == "param" && name == params.name(i), ErrorKind::ParseError,
            "expected parameter " + params.name(i) + ", found '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) ls >> d;
    require(!ls.fail() && shape == params.value(i).shape(), ErrorKind::ParseError,
            "parameter " + name + " has shape " + shape_str(shape) + ", expected " +
                shape_str(params.value(i).shape()));
    Tensor<T>& t = params.value(i);
    in.read(reinterpret_cast<char*>(t.data().data()), std::streamsize(t.size() * sizeof(T)));
    require(in.good(), ErrorKind::ParseError, "checkpoint truncated in parameter " + name);
  }
  require(detail::read_line(in, "trailer") == "end", ErrorKind::ParseError, "missing checkpoint trailer");
  if (header_out) *header_out = std::move(h);
  return model;
}

}  // namespace lmvcat
