#pragma once

#include "uemb/contrastive.hpp"
#include "uemb/dataio.hpp"
#include "uemb/embedding_set.hpp"
#include "uemb/encoder.hpp"
#include "uemb/error.hpp"
#include "uemb/formatting.hpp"
#include "uemb/gradcache.hpp"
#include "uemb/random.hpp"
#include "uemb/report.hpp"
#include "uemb/retrieval.hpp"
#include "uemb/sampler.hpp"
#include "uemb/synthetic.hpp"
#include "uemb/task.hpp"
#include "uemb/tensor.hpp"
#include "uemb/train.hpp"
