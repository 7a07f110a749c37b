from guidelearn.tasks.metrics import PRF, classification_prf, micro_prf, prf_from_counts, role_level_eval
from guidelearn.tasks.relation import (
    DataError,
    RelationInstanceRecord,
    load_instances,
    load_relation_dataset,
    run_relation_task,
)
from guidelearn.tasks.event import (
    SHARES_PATTERN,
    EventDocumentRecord,
    EventRecord,
    ExtractionError,
    classify_triggers,
    extract_arguments,
    identify_triggers,
    load_event_dataset,
    parse_event_table,
    run_event_pipeline,
)
