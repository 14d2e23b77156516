"""Two-stage zero-shot ranking: lexical retrieval, query-likelihood
re-ranking through pluggable logprob providers, score fusion, and
TREC-style evaluation."""

from .corpus import (
    Document,
    FormatError,
    QrelSet,
    Query,
    Run,
    load_corpus,
    load_qrels,
    load_queries,
    read_run,
    write_run,
)
from .evaluation import EvalReport, SigResult, ndcg_at_k, paired_ttest, significance_matrix
from .fusion import interpolate, minmax_normalize, sweep_alpha, truncate
from .likelihood import (
    BigramLm,
    LikelihoodRequest,
    LikelihoodResult,
    ProtocolError,
    ProviderError,
    RemoteProvider,
    TransportError,
    make_request,
    rerank,
    rerank_run,
    score_query_likelihood,
)
from .prompts import (
    FewShotExample,
    PromptCatalog,
    PromptTemplate,
    default_catalog,
    load_catalog,
    render_fewshot,
    render_prompt,
    save_catalog,
)
from .ranking import (
    Analyzer,
    Bm25Params,
    DirichletParams,
    InvertedIndex,
    bm25_score,
    bm25_search,
    build_index,
    dirichlet_qlm_score,
    dirichlet_search,
    load_index,
    save_index,
)

__version__ = "0.1.0"
