#pragma once

// Hand-built model whose predictions can be worked out on paper.
//
// Images are constant grids of intensity v. The stem passes v through on
// channel 0, every residual branch is zeroed and shortcuts are identities, so
// X_1 = (v, 0, ...). Token t embeds to (t, 0, ...) and the text blocks are
// zeroed too, so X_2 = (mean token id, 0, ...). Every classifier scores class
// c as 2 c x - c^2, whose argmax is the class index nearest to x.

#include <string>
#include <vector>

#include "mfuse/data.hpp"
#include "mfuse/fusion_head.hpp"

namespace fixture {

using namespace mfuse;

inline void nearest_index_classifier(Dense& d) {
  d.weight.value.fill(0.0);
  for (std::size_t c = 0; c < d.out(); ++c) {
    d.weight.value[c] = 2.0 * static_cast<double>(c);  // row 0 of [in, out]
    d.bias.value[c] = -static_cast<double>(c * c);
  }
}

inline void zero(Conv& c) {
  c.weight.value.fill(0.0);
  c.bias.value.fill(0.0);
}

inline ModelState nearest_index_model(std::size_t n_classes) {
  ModelSpec spec;
  spec.image = BranchSpec{{4, 4, 4}, 4, n_classes, {0}};
  spec.text = BranchSpec{{4, 4}, 4, n_classes, {0}};
  spec.image_size = 32;
  spec.seq_len = 4;
  spec.vocab_size = 64;
  ModelState m = build_model(spec, 0);

  zero(m.image.stem);
  // Centre tap of a 3x3 kernel: row (1 * 3 + 1) * c_in + 0, column 0.
  m.image.stem.weight.value[4 * m.image.stem.weight.value.dim(1)] = 1.0;
  for (auto& b : m.image.blocks) {
    zero(b.conv1);
    zero(b.conv2);
    if (b.shortcut) {
      zero(*b.shortcut);
      b.shortcut->weight.value[0] = 1.0;
    }
  }
  m.text.embedding.value.fill(0.0);
  for (std::size_t t = 0; t < spec.vocab_size; ++t)
    m.text.embedding.value[t * spec.text.widths[0]] = static_cast<double>(t);
  for (auto& b : m.text.blocks) {
    for (Dense* d : {&b.expand, &b.contract}) {
      d->weight.value.fill(0.0);
      d->bias.value.fill(0.0);
    }
  }
  for (Dense* f : {&m.image.feature, &m.text.feature}) {
    f->weight.value.fill(0.0);
    f->bias.value.fill(0.0);
    f->weight.value[0] = 1.0;
  }
  nearest_index_classifier(m.image.classifier);
  nearest_index_classifier(m.text.classifier);
  nearest_index_classifier(m.head.classifier);
  return m;
}

inline LabeledSample sample(std::string id, int label, double intensity, int token) {
  LabeledSample s;
  s.id = std::move(id);
  s.label = label;
  s.image.assign(32 * 32, intensity);
  s.tokens.assign(4, token);
  return s;
}

// Five samples labelled in the Tobacco-3482 vocabulary, scored by a model
// over the sixteen RVL-CDIP classes.
//
//   id  label   v   token  image pred         text pred        fusion (v + token)
//   s1  ADVE    0   4      Advertisement      Form             4  -> Form
//   s2  Email   2   2      Email              Email            4  -> Form
//   s3  Memo    7   8      Letter             Memo             15 -> Specification, masked -> Scientific report
//   s4  Note    3   3      (excluded)
//   s5  Report  15  14     Specification, masked -> Scientific report
//                                             Scientific report 29 -> Scientific report
inline Dataset transfer_fixture() {
  Dataset d;
  d.class_names = tobacco3482_class_names();
  d.image_size = 32;
  d.seq_len = 4;
  d.vocab_size = 64;
  auto idx = [&](const std::string& n) {
    return static_cast<int>(std::find(d.class_names.begin(), d.class_names.end(), n) - d.class_names.begin());
  };
  d.samples = {sample("s1", idx("ADVE"), 0.0, 4), sample("s2", idx("Email"), 2.0, 2),
               sample("s3", idx("Memo"), 7.0, 8), sample("s4", idx("Note"), 3.0, 3),
               sample("s5", idx("Report"), 15.0, 14)};
  return d;
}

// Expected per-class table for the fixture, by hand. Report classes are the
// nine mapped RVL-CDIP names in model output order; evaluated labels are
// Advertisement, Email, Memo, Scientific report.
//   image:  Adv->Adv, Email->Email, Memo->Letter, SciRep->SciRep
//   text:   Adv->Form, Email->Email, Memo->Memo, SciRep->SciRep
//   fusion: Adv->Form, Email->Form, Memo->SciRep, SciRep->SciRep
inline std::string expected_transfer_table() {
  return "class,image_precision,image_recall,image_f1,text_precision,text_recall,text_f1,"
         "fusion_precision,fusion_recall,fusion_f1,support\n"
         "Advertisement,1.0000,1.0000,1.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,1\n"
         "Email,1.0000,1.0000,1.0000,1.0000,1.0000,1.0000,0.0000,0.0000,0.0000,1\n"
         "Form,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0\n"
         "Letter,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0\n"
         "Memo,0.0000,0.0000,0.0000,1.0000,1.0000,1.0000,0.0000,0.0000,0.0000,1\n"
         "News article,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0\n"
         "Resume,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0\n"
         "Scientific publication,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0\n"
         "Scientific report,1.0000,1.0000,1.0000,1.0000,1.0000,1.0000,0.5000,1.0000,0.6667,1\n";
}

}  // namespace fixture
