#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace clm {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // Column index by name; throws if absent.
  std::size_t column(std::string_view name) const;
};

// RFC 4180-style parsing: quoted fields may contain commas, quotes ("") and
// newlines. Every row must have as many fields as the header.
CsvTable parse_csv(std::string_view text);
CsvTable read_csv(const std::filesystem::path& path);

// Shortest text that parses back to the same double.
std::string format_number(double v);

class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header);
  void add(std::vector<std::string> row);
  std::string str() const;
  std::size_t size() const { return rows_.size(); }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

}  // namespace clm
