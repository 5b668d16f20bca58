#include "caml/info_theory.hpp"

#include <algorithm>
#include <cmath>

#include "caml/errors.hpp"

namespace caml::info {

namespace {

constexpr double kLog2 = 0.6931471805599453094172321214581766;

std::int64_t support(const std::vector<int>& cards) {
  std::int64_t n = 1;
  for (int c : cards) {
    if (c < 1) raise(ErrorKind::Parameter, "cardinalities must be positive");
    n *= c;
    if (n > kMaxJointSupport)
      raise(ErrorKind::Abstraction,
            "joint support exceeds " + std::to_string(kMaxJointSupport));
  }
  return n;
}

// Mixed-radix index of the selected variables for joint entry `flat`.
struct VarIndexer {
  std::vector<std::int64_t> strides;  // per selected variable, within marginal
  std::vector<std::int64_t> table_strides;
  std::vector<int> table_cards;
  std::int64_t marg_size = 1;

  VarIndexer(const JointTable& t, std::span<const int> vars) {
    std::vector<std::int64_t> full(t.cards.size());
    std::int64_t s = 1;
    for (int v = t.n_vars() - 1; v >= 0; --v) {
      full[static_cast<std::size_t>(v)] = s;
      s *= t.cards[static_cast<std::size_t>(v)];
    }
    for (int v : vars) {
      strides.push_back(marg_size);
      marg_size *= t.cards[static_cast<std::size_t>(v)];
      table_strides.push_back(full[static_cast<std::size_t>(v)]);
      table_cards.push_back(t.cards[static_cast<std::size_t>(v)]);
    }
    // strides above assign the first selected var the smallest stride; any
    // consistent mixed radix works for marginalization.
  }

  std::int64_t operator()(std::int64_t flat) const {
    std::int64_t idx = 0;
    for (std::size_t i = 0; i < strides.size(); ++i) {
      std::int64_t digit = (flat / table_strides[i]) % table_cards[i];
      idx += digit * strides[i];
    }
    return idx;
  }
};

void check_vars(const JointTable& t, std::span<const int> vars,
                const char* who) {
  if (vars.empty())
    raise(ErrorKind::Parameter, std::string(who) + ": empty variable set");
  for (int v : vars) {
    if (v < 1 || v > t.n_x())
      raise(ErrorKind::Parameter,
            std::string(who) + ": variable index " + std::to_string(v) +
                " outside 1.." + std::to_string(t.n_x()));
  }
}

}  // namespace

void validate(const JointTable& t) {
  if (t.cards.size() < 2)
    raise(ErrorKind::Parameter, "joint table needs y and at least one x");
  std::int64_t n = support(t.cards);
  if (static_cast<std::int64_t>(t.probs.size()) != n)
    raise(ErrorKind::Dimension, "prob table length does not match cardinalities");
  long double sum = 0.0L;
  for (double p : t.probs) {
    if (p < 0.0) raise(ErrorKind::Domain, "negative probability");
    sum += p;
  }
  if (std::fabs(static_cast<double>(sum - 1.0L)) > 1e-12)
    raise(ErrorKind::Domain, "probabilities sum to " +
                                 std::to_string(static_cast<double>(sum)) +
                                 ", not 1");
}

JointTable from_weights(std::vector<int> cards, std::vector<double> weights) {
  std::int64_t n = support(cards);
  if (static_cast<std::int64_t>(weights.size()) != n)
    raise(ErrorKind::Dimension, "weight table length does not match cardinalities");
  long double sum = 0.0L;
  for (double w : weights) {
    if (w < 0.0) raise(ErrorKind::Domain, "negative weight");
    sum += w;
  }
  if (!(sum > 0.0L)) raise(ErrorKind::Domain, "weights sum to zero");
  for (double& w : weights)
    w = static_cast<double>(static_cast<long double>(w) / sum);
  JointTable t{std::move(cards), std::move(weights)};
  validate(t);
  return t;
}

double mutual_information(const JointTable& t, std::span<const int> vars) {
  check_vars(t, vars, "mutual_information");

  std::vector<int> yv = {0};
  std::vector<int> yplus(vars.begin(), vars.end());
  yplus.insert(yplus.begin(), 0);

  VarIndexer iy(t, yv);
  VarIndexer iv(t, vars);
  VarIndexer iyv(t, yplus);

  std::vector<long double> py(static_cast<std::size_t>(iy.marg_size), 0.0L);
  std::vector<long double> pv(static_cast<std::size_t>(iv.marg_size), 0.0L);
  std::vector<long double> pyv(static_cast<std::size_t>(iyv.marg_size), 0.0L);

  for (std::int64_t f = 0; f < static_cast<std::int64_t>(t.probs.size()); ++f) {
    double p = t.probs[static_cast<std::size_t>(f)];
    if (p == 0.0) continue;
    py[static_cast<std::size_t>(iy(f))] += p;
    pv[static_cast<std::size_t>(iv(f))] += p;
    pyv[static_cast<std::size_t>(iyv(f))] += p;
  }

  // iyv assigns y the smallest stride: index = y + |y| * v_index
  long double mi = 0.0L;
  std::int64_t ycard = t.cards[0];
  for (std::int64_t v = 0; v < iv.marg_size; ++v) {
    for (std::int64_t y = 0; y < ycard; ++y) {
      long double p = pyv[static_cast<std::size_t>(v * ycard + y)];
      if (p <= 0.0L) continue;
      mi += p * std::log(p / (py[static_cast<std::size_t>(y)] *
                              pv[static_cast<std::size_t>(v)]));
    }
  }
  return static_cast<double>(mi) / kLog2;
}

double conditional_mi(const JointTable& t, int var, std::span<const int> given) {
  std::vector<int> vv = {var};
  check_vars(t, vv, "conditional_mi");
  for (int g : given) {
    if (g == var)
      raise(ErrorKind::Parameter, "conditional_mi: var overlaps given set");
  }
  if (given.empty()) {
    return mutual_information(t, vv);
  }
  check_vars(t, given, "conditional_mi");

  // I(y; v | G) = sum p(y,v,g) log [ p(y,v,g) p(g) / (p(y,g) p(v,g)) ]
  std::vector<int> yvg = {0, var};
  yvg.insert(yvg.end(), given.begin(), given.end());
  std::vector<int> yg = {0};
  yg.insert(yg.end(), given.begin(), given.end());
  std::vector<int> vg = {var};
  vg.insert(vg.end(), given.begin(), given.end());
  std::vector<int> gg(given.begin(), given.end());

  VarIndexer iyvg(t, yvg), iyg(t, yg), ivg(t, vg), ig(t, gg);
  std::vector<long double> pyvg(static_cast<std::size_t>(iyvg.marg_size), 0.0L);
  std::vector<long double> pyg(static_cast<std::size_t>(iyg.marg_size), 0.0L);
  std::vector<long double> pvg(static_cast<std::size_t>(ivg.marg_size), 0.0L);
  std::vector<long double> pg(static_cast<std::size_t>(ig.marg_size), 0.0L);

  std::vector<std::int64_t> idx_yvg, idx_yg, idx_vg, idx_g;
  for (std::int64_t f = 0; f < static_cast<std::int64_t>(t.probs.size()); ++f) {
    double p = t.probs[static_cast<std::size_t>(f)];
    if (p == 0.0) continue;
    pyvg[static_cast<std::size_t>(iyvg(f))] += p;
    pyg[static_cast<std::size_t>(iyg(f))] += p;
    pvg[static_cast<std::size_t>(ivg(f))] += p;
    pg[static_cast<std::size_t>(ig(f))] += p;
  }

  long double mi = 0.0L;
  // walk the (y, v, g) marginal via its own mixed radix: y fastest, then v,
  // then the given block (matching VarIndexer stride assignment).
  std::int64_t ycard = t.cards[0];
  std::int64_t vcard = t.cards[static_cast<std::size_t>(var)];
  std::int64_t gsize = ig.marg_size;
  for (std::int64_t g = 0; g < gsize; ++g) {
    for (std::int64_t v = 0; v < vcard; ++v) {
      for (std::int64_t y = 0; y < ycard; ++y) {
        long double p =
            pyvg[static_cast<std::size_t>((g * vcard + v) * ycard + y)];
        if (p <= 0.0L) continue;
        long double pyg_v = pyg[static_cast<std::size_t>(g * ycard + y)];
        long double pvg_v = pvg[static_cast<std::size_t>(g * vcard + v)];
        long double pg_v = pg[static_cast<std::size_t>(g)];
        mi += p * std::log(p * pg_v / (pyg_v * pvg_v));
      }
    }
  }
  return static_cast<double>(mi) / kLog2;
}

double entropy_y(const JointTable& t) {
  std::vector<int> yv = {0};
  VarIndexer iy(t, yv);
  std::vector<long double> py(static_cast<std::size_t>(iy.marg_size), 0.0L);
  for (std::int64_t f = 0; f < static_cast<std::int64_t>(t.probs.size()); ++f) {
    double p = t.probs[static_cast<std::size_t>(f)];
    if (p > 0.0) py[static_cast<std::size_t>(iy(f))] += p;
  }
  long double h = 0.0L;
  for (long double p : py)
    if (p > 0.0L) h -= p * std::log(p);
  return static_cast<double>(h) / kLog2;
}

ChainRuleReport chain_rule_check(const JointTable& t) {
  validate(t);
  if (t.n_x() < 1)
    raise(ErrorKind::Parameter, "chain_rule_check needs at least one x variable");

  ChainRuleReport report;
  std::vector<int> all;
  for (int v = 1; v <= t.n_x(); ++v) all.push_back(v);
  report.total_bits = mutual_information(t, all);

  std::vector<int> prefix;
  for (int v = 1; v <= t.n_x(); ++v) {
    report.term_bits.push_back(conditional_mi(t, v, prefix));
    prefix.push_back(v);
    std::vector<int> single = {v};
    report.single_bits.push_back(mutual_information(t, single));
  }
  report.max_single_bits =
      *std::max_element(report.single_bits.begin(), report.single_bits.end());

  double chain_sum = 0.0;
  for (double term : report.term_bits) chain_sum += term;

  report.ok = true;
  if (std::fabs(chain_sum - report.total_bits) > 1e-9) {
    report.ok = false;
    report.detail = "chain sum " + std::to_string(chain_sum) +
                    " differs from I(y;X) " + std::to_string(report.total_bits);
  }
  for (std::size_t k = 0; k < report.term_bits.size(); ++k) {
    if (report.term_bits[k] < -1e-12) {
      report.ok = false;
      report.detail = "term " + std::to_string(k + 1) + " negative: " +
                      std::to_string(report.term_bits[k]);
    }
  }
  if (report.total_bits < report.max_single_bits - 1e-12) {
    report.ok = false;
    report.detail = "I(y;X) " + std::to_string(report.total_bits) +
                    " below max single " + std::to_string(report.max_single_bits);
  }
  return report;
}

JointTable random_table(std::span<const int> cards, Rng& rng) {
  std::vector<int> c(cards.begin(), cards.end());
  std::int64_t n = support(c);
  std::vector<double> w(static_cast<std::size_t>(n));
  // Dirichlet(1) via normalized Exp(1) draws.
  for (double& v : w) v = -std::log(1.0 - rng.uniform() + 1e-300);
  return from_weights(std::move(c), std::move(w));
}

}  // namespace caml::info
