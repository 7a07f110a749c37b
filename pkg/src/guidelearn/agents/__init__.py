from guidelearn.agents.templates import (
    EMPTY_GUIDELINES,
    ROLE_PLACEHOLDERS,
    PromptTemplate,
    TemplateError,
    format_guideline_block,
    render_prompt,
)
from guidelearn.agents.backends import (
    AgentBackend,
    BackendError,
    ChatTurn,
    ContentError,
    FunctionBackend,
    RemoteChatBackend,
    ScriptedBackend,
)
from guidelearn.agents.embeddings import EmbeddingProvider, HashedEmbedder, RemoteEmbedder, hashed_embedding

# roles depends on guidelearn.core, import it as guidelearn.agents.roles
