#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "lmvcat/error.hpp"
#include "lmvcat/tensor.hpp"

namespace lmvcat::csv {

/// Reads a headerless comma-separated numeric matrix.
inline Tensor<double> read_matrix(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::MissingFile, "cannot open " + path.string());
  std::vector<double> data;
  std::size_t cols = 0, rows = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::size_t count = 0;
    const char* p = line.data();
    const char* end = p + line.size();
    while (true) {
      while (p < end && *p == ' ') ++p;
      double value = 0.0;
      auto [next, ec] = std::from_chars(p, end, value);
      require(ec == std::errc(), ErrorKind::ParseError,
              path.string() + ":" + std::to_string(line_no) + ": not a number");
      data.push_back(value);
      ++count;
      p = next;
      while (p < end && *p == ' ') ++p;
      if (p == end) break;
      require(*p == ',', ErrorKind::ParseError, path.string() + ":" + std::to_string(line_no) + ": expected ','");
      ++p;
    }
    if (rows == 0) cols = count;
    require(count == cols, ErrorKind::DimensionMismatch,
            path.string() + ":" + std::to_string(line_no) + ": expected " + std::to_string(cols) + " columns, got " +
                std::to_string(count));
    ++rows;
  }
  return Tensor<double>(Shape{rows, cols}, std::move(data));
}

/// Writes the shortest decimal form that round-trips each value exactly.
inline void write_matrix(const std::filesystem::path& path, const Tensor<double>& m) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::MissingFile, "cannot write " + path.string());
  char buf[64];
  std::string line;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    line.clear();
    for (std::size_t c = 0; c < m.cols(); ++c) {
      if (c) line.push_back(',');
      const double v = m(r, c) == 0.0 ? 0.0 : m(r, c);
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
      line.append(buf, ptr);
    }
    line.push_back('\n');
    out << line;
  }
  require(out.good(), ErrorKind::MissingFile, "failed writing " + path.string());
}

}  // namespace lmvcat::csv
