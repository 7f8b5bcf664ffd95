#include "maskattn/analysis.hpp"
#include "maskattn/error.hpp"
#include "maskattn/key_value.hpp"

namespace maskattn {

void export_heatmap(const Tensor& prob, const std::string& path) {
  if (prob.rank() != 2) {
    throw DimensionError("export_heatmap: expected [H x W], got " + shape_to_string(prob.shape()));
  }
  std::vector<unsigned char> bytes(prob.numel());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = to_byte(prob[i]);
  write_pgm(path, prob.dim(0), prob.dim(1), bytes);
}

namespace {

std::string quote(const std::string& field) {
  if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

void append_row(std::string& out, const std::vector<std::string>& row) {
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (i) out += ",";
    out += quote(row[i]);
  }
  out += "\n";
}

}  // namespace

std::string to_csv(const CsvTable& table) {
  std::string out;
  append_row(out, table.header);
  for (const auto& row : table.rows) {
    if (row.size() != table.header.size()) {
      throw DimensionError("csv row has " + std::to_string(row.size()) + " fields, header has " +
                           std::to_string(table.header.size()));
    }
    append_row(out, row);
  }
  return out;
}

CsvTable parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      field.clear();
      records.push_back(std::move(row));
      row.clear();
      any = false;
    } else {
      field += c;
      any = true;
    }
  }
  if (quoted) throw IoError("csv: unterminated quoted field");
  if (any || !field.empty()) {
    row.push_back(std::move(field));
    records.push_back(std::move(row));
  }
  CsvTable table;
  if (records.empty()) return table;
  table.header = std::move(records.front());
  table.rows.assign(std::make_move_iterator(records.begin() + 1), std::make_move_iterator(records.end()));
  return table;
}

void export_csv(const CsvTable& table, const std::string& path) {
  write_text_file(path, to_csv(table));
}

void export_descriptors(const Tensor& descriptors, const std::vector<int>& labels,
                        const std::string& path) {
  if (descriptors.rank() != 2 || descriptors.dim(0) != labels.size()) {
    throw DimensionError("export_descriptors: " + shape_to_string(descriptors.shape()) + " with " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t c = descriptors.dim(1);
  CsvTable table;
  table.header.push_back("label");
  for (std::size_t k = 0; k < c; ++k) table.header.push_back("d" + std::to_string(k));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::vector<std::string> row{std::to_string(labels[i])};
    for (std::size_t k = 0; k < c; ++k) row.push_back(format_real(descriptors[i * c + k]));
    table.rows.push_back(std::move(row));
  }
  export_csv(table, path);
}

}  // namespace maskattn
