#pragma once

#include <charconv>
#include <chrono>
#include <cstdio>
#include <string>
#include <string_view>

#include "gppcast/errors.hpp"

namespace gppcast {

using Date = std::chrono::year_month_day;

inline int year_of(const Date& d) { return static_cast<int>(d.year()); }
inline unsigned month_of(const Date& d) { return static_cast<unsigned>(d.month()); }
inline unsigned day_of(const Date& d) { return static_cast<unsigned>(d.day()); }

inline Date make_date(int y, unsigned m, unsigned d) {
  return Date{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
}

inline long days_since_epoch(const Date& d) {
  return std::chrono::sys_days{d}.time_since_epoch().count();
}

inline Date add_days(const Date& d, long n) {
  return Date{std::chrono::sys_days{d} + std::chrono::days{n}};
}

inline long days_between(const Date& from, const Date& to) {
  return days_since_epoch(to) - days_since_epoch(from);
}

inline bool is_leap(int year) { return std::chrono::year{year}.is_leap(); }

// 1-based day of year.
inline unsigned day_of_year(const Date& d) {
  const Date jan1 = make_date(year_of(d), 1, 1);
  return static_cast<unsigned>(days_between(jan1, d) + 1);
}

// Day-of-year on a 365-day calendar: Feb 29 shares bin 59 with Feb 28 and
// later leap-year days shift down by one.
inline unsigned seasonal_day(const Date& d) {
  const unsigned doy = day_of_year(d);
  return is_leap(year_of(d)) && doy >= 60 ? doy - 1 : doy;
}

// Strict YYYY-MM-DD.
inline bool try_parse_date(std::string_view s, Date& out) {
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') return false;
  int y = 0;
  unsigned m = 0, d = 0;
  auto field = [&](std::size_t pos, std::size_t len, auto& v) {
    const char* first = s.data() + pos;
    auto [ptr, ec] = std::from_chars(first, first + len, v);
    return ec == std::errc{} && ptr == first + len;
  };
  if (!field(0, 4, y) || !field(5, 2, m) || !field(8, 2, d)) return false;
  out = make_date(y, m, d);
  return out.ok();
}

inline Date parse_date(std::string_view s) {
  Date d;
  if (!try_parse_date(s, d)) throw DataError("malformed date '" + std::string(s) + "'");
  return d;
}

inline std::string format_date(const Date& d) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", year_of(d), month_of(d), day_of(d));
  return buf;
}

}  // namespace gppcast
