#pragma once

#include "xlt/autograd.hpp"
#include "xlt/datasets.hpp"
#include "xlt/encoder.hpp"
#include "xlt/experiment.hpp"
#include "xlt/heads.hpp"
#include "xlt/manifest.hpp"
#include "xlt/metrics.hpp"
#include "xlt/model.hpp"
#include "xlt/random.hpp"
#include "xlt/report.hpp"
#include "xlt/synthetic.hpp"
#include "xlt/tensor.hpp"
#include "xlt/tokenizer.hpp"
#include "xlt/trainer.hpp"
#include "xlt/transfer.hpp"
