#pragma once

#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "uemb/error.hpp"
#include "uemb/retrieval.hpp"

namespace uemb {

enum class ReportFormat { json_lines, csv, table };

inline ReportFormat parse_report_format(std::string_view s) {
  if (s == "json" || s == "jsonl" || s == "json-lines") return ReportFormat::json_lines;
  if (s == "csv") return ReportFormat::csv;
  if (s == "table" || s == "text") return ReportFormat::table;
  throw ValidationError("unknown report format '" + std::string(s) + "'");
}

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        fields.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        fields.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else if (c != '\r') {
      fields.back() += c;
    }
  }
  return fields;
}

inline void emit_table(const EvalReport& r, std::ostream& os) {
  // Scores are shown as percentages with one decimal, the usual benchmark layout.
  auto pct = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
    return std::string(buf);
  };
  std::size_t width = 12;
  for (const auto& t : r.tasks) width = std::max(width, t.task.size());
  for (const auto& c : r.categories) width = std::max(width, c.name.size());
  auto row = [&](std::string_view name, std::string_view metric, const std::string& value,
                 std::size_t n) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "  %-10s %8s %8zu\n", std::string(metric).c_str(), value.c_str(), n);
    os << std::string(name) << std::string(width - std::min(width, name.size()), ' ') << buf;
  };
  os << "task" << std::string(width - 4, ' ') << "  metric        score    count\n";
  for (const auto& t : r.tasks) row(t.task, t.metric, pct(t.value), t.query_count);
  os << '\n' << "category" << std::string(width - 8, ' ') << "  group         score    tasks\n";
  for (const auto& c : r.categories) row(c.name, c.group, pct(c.value), c.task_count);
  os << '\n' << "group" << std::string(width - 5, ' ') << "                score    tasks\n";
  for (const auto& g : r.groups) row(g.name, "", pct(g.value), g.task_count);
  os << '\n';
  row("overall", "", pct(r.overall), r.task_count);
}

}  // namespace detail

/// Writes the report. JSON lines and CSV keep full double precision and can
/// be read back with read_report; the text table is for people.
inline void emit_report(const EvalReport& r, ReportFormat format, std::ostream& os) {
  using nlohmann::json;
  switch (format) {
    case ReportFormat::json_lines:
      for (const auto& t : r.tasks) {
        os << json{{"kind", "task"}, {"name", t.task}, {"category", t.category}, {"group", t.group},
                   {"metric", t.metric}, {"value", t.value}, {"count", t.query_count}}
                  .dump()
           << '\n';
      }
      for (const auto& c : r.categories) {
        os << json{{"kind", "category"}, {"name", c.name}, {"group", c.group}, {"value", c.value},
                   {"count", c.task_count}}
                  .dump()
           << '\n';
      }
      for (const auto& g : r.groups) {
        os << json{{"kind", "group"}, {"name", g.name}, {"value", g.value}, {"count", g.task_count}}.dump()
           << '\n';
      }
      os << json{{"kind", "overall"}, {"value", r.overall}, {"count", r.task_count}}.dump() << '\n';
      break;
    case ReportFormat::csv:
      os << "kind,name,category,group,metric,value,count\n";
      for (const auto& t : r.tasks) {
        os << "task," << detail::csv_field(t.task) << ',' << detail::csv_field(t.category) << ','
           << detail::csv_field(t.group) << ',' << t.metric << ',' << detail::fmt_double(t.value) << ','
           << t.query_count << '\n';
      }
      for (const auto& c : r.categories) {
        os << "category," << detail::csv_field(c.name) << ",," << detail::csv_field(c.group) << ",,"
           << detail::fmt_double(c.value) << ',' << c.task_count << '\n';
      }
      for (const auto& g : r.groups) {
        os << "group," << detail::csv_field(g.name) << ",,,," << detail::fmt_double(g.value) << ','
           << g.task_count << '\n';
      }
      os << "overall,,,,," << detail::fmt_double(r.overall) << ',' << r.task_count << '\n';
      break;
    case ReportFormat::table:
      detail::emit_table(r, os);
      break;
  }
}

inline std::string format_report(const EvalReport& r, ReportFormat format) {
  std::ostringstream os;
  emit_report(r, format, os);
  return os.str();
}

/// Reads a report written as JSON lines or CSV.
inline EvalReport read_report(std::istream& in, ReportFormat format) {
  EvalReport r;
  std::string line;
  std::size_t line_no = 0;
  bool saw_overall = false;
  if (format == ReportFormat::table) throw ValidationError("read_report: text tables are not parseable");
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "report:" + std::to_string(line_no);
    std::string kind, name, category, group, metric;
    double value = 0.0;
    std::size_t count = 0;
    if (format == ReportFormat::json_lines) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
        kind = j.at("kind").get<std::string>();
        name = j.value("name", "");
        category = j.value("category", "");
        group = j.value("group", "");
        metric = j.value("metric", "");
        value = j.at("value").get<double>();
        count = j.at("count").get<std::size_t>();
      } catch (const nlohmann::json::exception& e) {
        throw ValidationError(where + ": " + e.what());
      }
    } else {
      if (line_no == 1) continue;  // header
      const auto f = detail::split_csv_line(line);
      if (f.size() != 7) throw ValidationError(where + ": expected 7 CSV fields");
      kind = f[0];
      name = f[1];
      category = f[2];
      group = f[3];
      metric = f[4];
      try {
        value = std::stod(f[5]);
        count = std::stoull(f[6]);
      } catch (const std::exception&) {
        throw ValidationError(where + ": bad number");
      }
    }
    if (kind == "task") {
      r.tasks.push_back({name, category, group, metric, value, count});
    } else if (kind == "category") {
      r.categories.push_back({name, group, value, count});
    } else if (kind == "group") {
      r.groups.push_back({name, value, count});
    } else if (kind == "overall") {
      r.overall = value;
      r.task_count = count;
      saw_overall = true;
    } else {
      throw ValidationError(where + ": unknown row kind '" + kind + "'");
    }
  }
  if (!saw_overall) throw ValidationError("report: missing overall row");
  return r;
}

}  // namespace uemb
