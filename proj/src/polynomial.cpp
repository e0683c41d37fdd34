#include "occusafe/polynomial.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace occusafe {
namespace polyalg {

int total_degree(const Exponent& e) {
  return std::accumulate(e.begin(), e.end(), 0);
}

bool GradedLexLess::operator()(const Exponent& a, const Exponent& b) const {
  const int da = total_degree(a);
  const int db = total_degree(b);
  if (da != db) return da < db;
  // Same degree: the tuple with the larger power on the earliest differing
  // slot comes first.
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) {
    if (a[i] != b[i]) return a[i] > b[i];
  }
  return a.size() < b.size();
}

std::size_t ExponentHash::operator()(const Exponent& e) const {
  std::size_t h = 1469598103934665603ull;
  for (int v : e) {
    h ^= static_cast<std::size_t>(v) + 0x9e3779b97f4a7c15ull + (h << 6) +
         (h >> 2);
  }
  return h;
}

namespace {

// Emits the degree-d class in canonical in-class order (descending power on
// the earlier slot).
void enumerate_class(int slot, int remaining, Exponent& current,
                     std::vector<Exponent>& out) {
  const int last = static_cast<int>(current.size()) - 1;
  if (slot == last) {
    current[slot] = remaining;
    out.push_back(current);
    current[slot] = 0;
    return;
  }
  for (int p = remaining; p >= 0; --p) {
    current[slot] = p;
    enumerate_class(slot + 1, remaining - p, current, out);
  }
  current[slot] = 0;
}

}  // namespace

std::vector<Exponent> enumerate_monomials(int num_vars, int max_degree) {
  if (num_vars < 1) throw std::invalid_argument("enumerate_monomials: need at least one variable");
  if (max_degree < 0) throw std::invalid_argument("enumerate_monomials: negative degree");
  std::vector<Exponent> out;
  Exponent current(num_vars, 0);
  for (int d = 0; d <= max_degree; ++d) {
    enumerate_class(0, d, current, out);
  }
  return out;
}

Polynomial::Polynomial(int num_state_vars) : num_state_vars_(num_state_vars) {
  if (num_state_vars < 1) {
    throw std::invalid_argument("Polynomial: need at least one state variable");
  }
}

Polynomial Polynomial::constant(int num_state_vars, double value) {
  Polynomial p(num_state_vars);
  if (value != 0.0) {
    p.terms_[Exponent(num_state_vars + 1, 0)] = value;
  }
  return p;
}

Polynomial Polynomial::variable(int num_state_vars, int slot) {
  if (slot < 0 || slot > num_state_vars) {
    throw std::invalid_argument("Polynomial::variable: slot out of range");
  }
  Polynomial p(num_state_vars);
  Exponent e(num_state_vars + 1, 0);
  e[slot] = 1;
  p.terms_[std::move(e)] = 1.0;
  return p;
}

Polynomial Polynomial::monomial(Exponent e, double coefficient) {
  if (e.empty()) throw std::invalid_argument("Polynomial::monomial: empty exponent");
  Polynomial p(static_cast<int>(e.size()) - 1);
  for (int v : e) {
    if (v < 0) throw std::invalid_argument("Polynomial::monomial: negative exponent");
  }
  if (coefficient != 0.0) p.terms_[std::move(e)] = coefficient;
  return p;
}

int Polynomial::degree() const {
  int d = 0;
  for (const auto& [e, c] : terms_) d = std::max(d, total_degree(e));
  return d;
}

double Polynomial::coefficient(const Exponent& e) const {
  auto it = terms_.find(e);
  return it == terms_.end() ? 0.0 : it->second;
}

void Polynomial::set_coefficient(const Exponent& e, double value) {
  if (static_cast<int>(e.size()) != num_slots()) {
    throw std::invalid_argument("Polynomial::set_coefficient: wrong exponent length");
  }
  if (value == 0.0) {
    terms_.erase(e);
  } else {
    terms_[e] = value;
  }
}

Polynomial& Polynomial::operator+=(const Polynomial& other) {
  if (other.num_state_vars_ != num_state_vars_) {
    throw std::invalid_argument("Polynomial: mixed variable counts");
  }
  for (const auto& [e, c] : other.terms_) {
    const double v = coefficient(e) + c;
    set_coefficient(e, v);
  }
  return *this;
}

Polynomial& Polynomial::operator-=(const Polynomial& other) {
  if (other.num_state_vars_ != num_state_vars_) {
    throw std::invalid_argument("Polynomial: mixed variable counts");
  }
  for (const auto& [e, c] : other.terms_) {
    const double v = coefficient(e) - c;
    set_coefficient(e, v);
  }
  return *this;
}

Polynomial& Polynomial::operator*=(double scalar) {
  if (scalar == 0.0) {
    terms_.clear();
    return *this;
  }
  for (auto& [e, c] : terms_) c *= scalar;
  return *this;
}

Polynomial Polynomial::operator-() const {
  Polynomial out(*this);
  for (auto& [e, c] : out.terms_) c = -c;
  return out;
}

Polynomial operator*(const Polynomial& a, const Polynomial& b) {
  if (a.num_state_vars_ != b.num_state_vars_) {
    throw std::invalid_argument("Polynomial: mixed variable counts");
  }
  Polynomial out(a.num_state_vars_);
  Exponent sum(a.num_slots());
  for (const auto& [ea, ca] : a.terms_) {
    for (const auto& [eb, cb] : b.terms_) {
      for (std::size_t i = 0; i < sum.size(); ++i) sum[i] = ea[i] + eb[i];
      const double v = out.coefficient(sum) + ca * cb;
      out.set_coefficient(sum, v);
    }
  }
  return out;
}

bool Polynomial::operator==(const Polynomial& other) const {
  return num_state_vars_ == other.num_state_vars_ && terms_ == other.terms_;
}

Polynomial Polynomial::pow(int exponent) const {
  if (exponent < 0) throw std::invalid_argument("Polynomial::pow: negative exponent");
  Polynomial result = Polynomial::constant(num_state_vars_, 1.0);
  for (int i = 0; i < exponent; ++i) result = result * (*this);
  return result;
}

Polynomial Polynomial::differentiate(int slot) const {
  if (slot < 0 || slot >= num_slots()) {
    throw std::invalid_argument("Polynomial::differentiate: slot out of range");
  }
  Polynomial out(num_state_vars_);
  for (const auto& [e, c] : terms_) {
    if (e[slot] == 0) continue;
    Exponent d = e;
    d[slot] -= 1;
    const double v = out.coefficient(d) + c * e[slot];
    out.set_coefficient(d, v);
  }
  return out;
}

namespace {

double ipow(double base, int e) {
  double r = 1.0;
  for (int i = 0; i < e; ++i) r *= base;
  return r;
}

}  // namespace

double Polynomial::evaluate(const std::vector<double>& point) const {
  if (static_cast<int>(point.size()) != num_slots()) {
    throw std::invalid_argument("Polynomial::evaluate: point has wrong dimension");
  }
  double acc = 0.0;
  for (const auto& [e, c] : terms_) {
    double term = c;
    for (std::size_t i = 0; i < point.size(); ++i) {
      if (e[i] != 0) term *= ipow(point[i], e[i]);
    }
    acc += term;
  }
  return acc;
}

Polynomial Polynomial::compose_affine(const std::vector<double>& scale,
                                      const std::vector<double>& shift,
                                      double cleanup_tol) const {
  if (static_cast<int>(scale.size()) != num_slots() ||
      static_cast<int>(shift.size()) != num_slots()) {
    throw std::invalid_argument("Polynomial::compose_affine: scale/shift must cover every slot");
  }
  // Power tables for (s_j z_j + c_j)^k, built once per slot.
  std::vector<std::vector<Polynomial>> powers(num_slots());
  for (int j = 0; j < num_slots(); ++j) {
    int max_e = 0;
    for (const auto& [e, c] : terms_) max_e = std::max(max_e, e[j]);
    Polynomial affine = Polynomial::variable(num_state_vars_, j) * scale[j] +
                        Polynomial::constant(num_state_vars_, shift[j]);
    powers[j].reserve(max_e + 1);
    powers[j].push_back(Polynomial::constant(num_state_vars_, 1.0));
    for (int k = 1; k <= max_e; ++k) {
      powers[j].push_back(powers[j].back() * affine);
    }
  }
  Polynomial out(num_state_vars_);
  for (const auto& [e, c] : terms_) {
    Polynomial term = Polynomial::constant(num_state_vars_, c);
    for (int j = 0; j < num_slots(); ++j) {
      if (e[j] != 0) term = term * powers[j][e[j]];
    }
    out += term;
  }
  return out.cleaned(cleanup_tol);
}

Polynomial Polynomial::cleaned(double tol) const {
  Polynomial out(num_state_vars_);
  for (const auto& [e, c] : terms_) {
    if (std::abs(c) > tol) out.terms_[e] = c;
  }
  return out;
}

double Polynomial::max_abs_coefficient() const {
  double m = 0.0;
  for (const auto& [e, c] : terms_) m = std::max(m, std::abs(c));
  return m;
}

namespace {

std::string format_coefficient(double c) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", c);
  return buf;
}

}  // namespace

std::string Polynomial::to_string() const {
  std::vector<std::string> names;
  names.reserve(num_state_vars_);
  for (int i = 1; i <= num_state_vars_; ++i) {
    names.push_back("x" + std::to_string(i));
  }
  return to_string(names);
}

std::string Polynomial::to_string(const std::vector<std::string>& state_names) const {
  if (static_cast<int>(state_names.size()) != num_state_vars_) {
    throw std::invalid_argument("Polynomial::to_string: wrong number of names");
  }
  if (terms_.empty()) return "0";
  std::ostringstream os;
  bool first = true;
  for (const auto& [e, c] : terms_) {
    const double mag = std::abs(c);
    if (first) {
      if (c < 0.0) os << "-";
      first = false;
    } else {
      os << (c < 0.0 ? " - " : " + ");
    }
    os << format_coefficient(mag);
    for (int j = 0; j < num_slots(); ++j) {
      if (e[j] == 0) continue;
      os << "*" << (j == 0 ? "t" : state_names[j - 1]);
      if (e[j] > 1) os << "^" << e[j];
    }
  }
  return os.str();
}

Polynomial lie_derivative(const Polynomial& v,
                          const std::vector<Polynomial>& f) {
  if (static_cast<int>(f.size()) != v.num_state_vars()) {
    throw std::invalid_argument("lie_derivative: dynamics dimension does not match variable count");
  }
  Polynomial out = v.differentiate(0);
  for (int i = 0; i < v.num_state_vars(); ++i) {
    if (f[i].num_state_vars() != v.num_state_vars()) {
      throw std::invalid_argument("lie_derivative: dynamics component has wrong variable count");
    }
    out += v.differentiate(i + 1) * f[i];
  }
  return out;
}

ParseError::ParseError(const std::string& message, std::size_t pos)
    : std::runtime_error(message + " (at position " + std::to_string(pos) + ")"),
      position(pos) {}

namespace {

// Recursive-descent parser over the documented grammar.
class Parser {
 public:
  Parser(const std::string& text, const std::vector<std::string>& state_names)
      : text_(text), state_names_(state_names) {}

  Polynomial parse() {
    Polynomial p = parse_expr();
    skip_ws();
    if (pos_ != text_.size()) {
      throw ParseError("unexpected trailing input", pos_);
    }
    return p;
  }

 private:
  int n() const { return static_cast<int>(state_names_.size()); }

  void skip_ws() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }

  bool peek_is(char c) {
    skip_ws();
    return pos_ < text_.size() && text_[pos_] == c;
  }

  bool consume(char c) {
    if (peek_is(c)) {
      ++pos_;
      return true;
    }
    return false;
  }

  Polynomial parse_expr() {
    Polynomial acc = parse_term();
    for (;;) {
      if (consume('+')) {
        acc += parse_term();
      } else if (consume('-')) {
        acc -= parse_term();
      } else {
        return acc;
      }
    }
  }

  Polynomial parse_term() {
    Polynomial acc = parse_factor();
    while (consume('*')) acc = acc * parse_factor();
    return acc;
  }

  Polynomial parse_factor() {
    skip_ws();
    if (consume('-')) return -parse_factor();
    if (consume('+')) return parse_factor();
    Polynomial base = parse_base();
    skip_ws();
    if (consume('^')) {
      return base.pow(parse_integer_exponent());
    }
    return base;
  }

  int parse_integer_exponent() {
    skip_ws();
    const std::size_t start = pos_;
    if (pos_ < text_.size() && (text_[pos_] == '-' || text_[pos_] == '+')) {
      if (text_[pos_] == '-') {
        throw ParseError("exponent must be a nonnegative integer", pos_);
      }
      ++pos_;
    }
    std::size_t digits = 0;
    long value = 0;
    while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
      value = value * 10 + (text_[pos_] - '0');
      if (value > 1000) throw ParseError("exponent too large", start);
      ++pos_;
      ++digits;
    }
    if (digits == 0) throw ParseError("expected integer exponent after '^'", start);
    if (pos_ < text_.size() && (text_[pos_] == '.' || text_[pos_] == 'e' || text_[pos_] == 'E')) {
      throw ParseError("exponent must be a nonnegative integer", start);
    }
    return static_cast<int>(value);
  }

  Polynomial parse_base() {
    skip_ws();
    if (pos_ >= text_.size()) {
      throw ParseError("unexpected end of input", pos_);
    }
    const char c = text_[pos_];
    if (c == '(') {
      ++pos_;
      Polynomial inner = parse_expr();
      if (!consume(')')) {
        throw ParseError("expected ')'", pos_);
      }
      return inner;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
      return parse_number();
    }
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      return parse_variable();
    }
    throw ParseError(std::string("unexpected character '") + c + "'", pos_);
  }

  Polynomial parse_number() {
    const std::size_t start = pos_;
    while (pos_ < text_.size() && (std::isdigit(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '.')) ++pos_;
    if (pos_ < text_.size() && (text_[pos_] == 'e' || text_[pos_] == 'E')) {
      std::size_t probe = pos_ + 1;
      if (probe < text_.size() && (text_[probe] == '+' || text_[probe] == '-')) ++probe;
      if (probe < text_.size() && std::isdigit(static_cast<unsigned char>(text_[probe]))) {
        pos_ = probe;
        while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) ++pos_;
      }
    }
    const std::string token = text_.substr(start, pos_ - start);
    try {
      std::size_t used = 0;
      const double value = std::stod(token, &used);
      if (used != token.size()) throw std::invalid_argument("partial");
      return Polynomial::constant(n(), value);
    } catch (const std::exception&) {
      throw ParseError("malformed number '" + token + "'", start);
    }
  }

  Polynomial parse_variable() {
    const std::size_t start = pos_;
    while (pos_ < text_.size() &&
           (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_')) {
      ++pos_;
    }
    const std::string name = text_.substr(start, pos_ - start);
    if (name == "t") return Polynomial::variable(n(), 0);
    for (int i = 0; i < n(); ++i) {
      if (state_names_[i] == name) return Polynomial::variable(n(), i + 1);
    }
    throw ParseError("unknown variable '" + name + "'", start);
  }

  const std::string& text_;
  const std::vector<std::string>& state_names_;
  std::size_t pos_ = 0;
};

}  // namespace

Polynomial parse_polynomial(const std::string& text,
                            const std::vector<std::string>& state_names) {
  if (state_names.empty()) {
    throw std::invalid_argument("parse_polynomial: need at least one state variable name");
  }
  for (const auto& name : state_names) {
    if (name == "t") {
      throw std::invalid_argument("parse_polynomial: 't' is reserved for the time variable");
    }
  }
  return Parser(text, state_names).parse();
}

}  // namespace polyalg
}  // namespace occusafe
