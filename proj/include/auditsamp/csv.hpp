#pragma once

#include <string>
#include <vector>

namespace audit {

// Minimal CSV support for the tool's own file formats: comma-separated,
// UTF-8, mandatory header row, double quotes for fields containing commas,
// quotes or newlines.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    std::vector<std::size_t> line_numbers;  // 1-based source line per row

    int column(const std::string& name) const;  // -1 when absent
    int require_column(const std::string& name) const;  // throws when absent
};

CsvTable read_csv(const std::string& path);
void write_csv(const std::string& path, const CsvTable& table);

// Shortest decimal form that parses back to the same double. Deterministic,
// so files produced under the same seed compare byte-identical.
std::string format_double(double v);

}  // namespace audit
