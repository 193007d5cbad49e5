#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace kinedec::csvio {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;  // rectangular, rows[i].size() == header.size()

  size_t cols() const { return header.size(); }
  // Column extracted as a contiguous vector.
  std::vector<double> column(size_t c) const;
  int find(const std::string& name) const;  // -1 if absent
};

// Deterministic shortest-faithful formatting at the given significant digits.
// 17 digits round-trips doubles exactly.
std::string format_double(double v, int sig_digits);

Table read_table(const std::filesystem::path& path);

void write_table(const std::filesystem::path& path, const std::vector<std::string>& header,
                 const std::vector<std::vector<double>>& rows, int sig_digits = 17);

}  // namespace kinedec::csvio
