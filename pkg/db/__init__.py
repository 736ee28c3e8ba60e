# Database package for the merge evaluation service: ORM models, response
# schemas and the session factory used by backend/app/routes.
