from django.urls import path, include
from rest_framework.routers import DefaultRouter
from .controllers import RunViewSet

router = DefaultRouter()

router.register(r"runs", RunViewSet, basename="runs")

urlpatterns = [
    path("", include(router.urls)),
]
