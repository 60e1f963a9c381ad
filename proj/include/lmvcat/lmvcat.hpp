#pragma once

#include "lmvcat/autodiff.hpp"
#include "lmvcat/checkpoint.hpp"
#include "lmvcat/csv.hpp"
#include "lmvcat/data.hpp"
#include "lmvcat/error.hpp"
#include "lmvcat/gradcheck.hpp"
#include "lmvcat/losses.hpp"
#include "lmvcat/metrics.hpp"
#include "lmvcat/model.hpp"
#include "lmvcat/params.hpp"
#include "lmvcat/random.hpp"
#include "lmvcat/tensor.hpp"
#include "lmvcat/trainer.hpp"
#include "lmvcat/verify.hpp"
#include "lmvcat/config.hpp"
